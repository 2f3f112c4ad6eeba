use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::spectral::SpectralConfig;
use super::Kernel;
use crate::autodiff::{Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatureConfig {
    pub input_dim: usize,
    pub feature_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub noise_dim: usize,
    pub freq_hidden: Vec<usize>,
    pub num_freq_samples: usize,
    pub activation: Activation,
    #[serde(default)]
    pub spectral: Option<SpectralConfig>,
}

impl RandomFeatureConfig {
    pub fn new(input_dim: usize, feature_dim: usize) -> Self {
        RandomFeatureConfig {
            input_dim,
            feature_hidden: vec![32, 32],
            feature_dim,
            noise_dim: 4,
            freq_hidden: vec![32],
            num_freq_samples: 64,
            activation: Activation::Tanh,
            spectral: None,
        }
    }
}

/// Kernel averaging two cosine expectations over learned frequencies:
///
/// `k(x0, x) = 1/2 E cos(w1^T (h(x0) - h(x))) + 1/2 E cos(w2^T (h(x0) - h(x)))`
///
/// `w1 = g1(e)` is a global implicit distribution. The pair-dependent
/// frequency is `w2 = A + B * (h(x0) + h(x)) / 2` with `[A, B] = g2(e)`, the
/// secant slope of `G(u) = A^T u + B^T (u * u) / 2`. Then
/// `w2^T (h(x0) - h(x)) = G(h(x0)) - G(h(x))`, which makes the second term a
/// symmetric positive-definite kernel for every noise draw.
#[derive(Clone, Debug)]
pub struct RandomFeatureKernel {
    pub feature_net: Mlp,
    pub freq_net_global: Mlp,
    pub freq_net_pairwise: Mlp,
    pub num_freq_samples: usize,
    noise_global: Tensor,
    noise_pair: Tensor,
    store: ParamStore,
}

/// Frequencies for the current noise draw, each `S x p`.
#[derive(Clone, Copy, Debug)]
pub struct Frequencies {
    pub global: Var,
    pub shift: Var,
    pub slope: Var,
}

impl RandomFeatureKernel {
    pub fn new(cfg: &RandomFeatureConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut widths = vec![cfg.input_dim];
        widths.extend(&cfg.feature_hidden);
        widths.push(cfg.feature_dim);
        let feature = Mlp::new(MlpSpec::new(widths, cfg.activation), &mut store, "h", rng)?
            .with_spectral(cfg.spectral);
        let freq = |out: usize| {
            let mut w = vec![cfg.noise_dim];
            w.extend(&cfg.freq_hidden);
            w.push(out);
            MlpSpec::new(w, cfg.activation)
        };
        let global = Mlp::new(freq(cfg.feature_dim), &mut store, "w1", rng)?;
        let pairwise = Mlp::new(freq(2 * cfg.feature_dim), &mut store, "w2", rng)?;
        Self::from_parts(store, feature, global, pairwise, cfg.num_freq_samples, rng)
    }

    /// Assembles a kernel from networks already registered in `store`.
    pub fn from_parts(
        store: ParamStore,
        feature_net: Mlp,
        freq_net_global: Mlp,
        freq_net_pairwise: Mlp,
        num_freq_samples: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_freq_samples == 0 {
            return Err(invalid("num_freq_samples must be at least 1"));
        }
        let p = feature_net.output_dim();
        if freq_net_global.output_dim() != p || freq_net_pairwise.output_dim() != 2 * p {
            return Err(invalid(format!(
                "frequency nets must output {p} and {} values",
                2 * p
            )));
        }
        if freq_net_global.input_dim() != freq_net_pairwise.input_dim() {
            return Err(invalid("frequency nets must share the noise dimension"));
        }
        let q = freq_net_global.input_dim();
        let mut k = RandomFeatureKernel {
            feature_net,
            freq_net_global,
            freq_net_pairwise,
            num_freq_samples,
            noise_global: Tensor::zeros(num_freq_samples, q),
            noise_pair: Tensor::zeros(num_freq_samples, q),
            store,
        };
        k.resample(rng);
        Ok(k)
    }

    pub fn input_dim(&self) -> usize {
        self.feature_net.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_net.output_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.freq_net_global.input_dim()
    }

    pub fn features(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.feature_net.forward(tape, p, x)
    }

    pub fn frequencies(&self, tape: &mut Tape, p: &[Var]) -> Result<Frequencies> {
        let ng = tape.leaf(self.noise_global.clone())?;
        let np = tape.leaf(self.noise_pair.clone())?;
        self.frequencies_from(tape, p, ng, np)
    }

    fn frequencies_from(&self, tape: &mut Tape, p: &[Var], ng: Var, np: Var) -> Result<Frequencies> {
        let global = self.freq_net_global.forward(tape, p, ng)?;
        let pair = self.freq_net_pairwise.forward(tape, p, np)?;
        let d = self.feature_dim();
        let shift = tape.slice_cols(pair, 0, d)?;
        let slope = tape.slice_cols(pair, d, d)?;
        for v in [global, shift, slope] {
            if !tape.value(v).is_finite() {
                return Err(Error::NonFinite("frequency network"));
            }
        }
        Ok(Frequencies {
            global,
            shift,
            slope,
        })
    }

    /// Phases `(H w1^T, G(H))`, each `n x S`.
    pub fn phases(&self, tape: &mut Tape, h: Var, f: &Frequencies) -> Result<(Var, Var)> {
        let wt = tape.transpose(f.global)?;
        let z = tape.matmul(h, wt)?;
        let at = tape.transpose(f.shift)?;
        let bt = tape.transpose(f.slope)?;
        let ha = tape.matmul(h, at)?;
        let h2 = tape.square(h)?;
        let hb = tape.matmul(h2, bt)?;
        let hb = tape.scale(hb, 0.5)?;
        let g = tape.add(ha, hb)?;
        Ok((z, g))
    }

    fn all_phases(&self, tape: &mut Tape, p: &[Var], x: Var, f: &Frequencies) -> Result<(Var, Var)> {
        let h = self.features(tape, p, x)?;
        self.phases(tape, h, f)
    }

    /// `E cos(a_i - b_j)` as a matrix.
    fn cos_mean(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let (ca, sa) = (tape.cos(a)?, tape.sin(a)?);
        let (cb, sb) = if a == b { (ca, sa) } else { (tape.cos(b)?, tape.sin(b)?) };
        let cbt = tape.transpose(cb)?;
        let sbt = tape.transpose(sb)?;
        let c = tape.matmul(ca, cbt)?;
        let s = tape.matmul(sa, sbt)?;
        let k = tape.add(c, s)?;
        tape.scale(k, 1.0 / self.num_freq_samples as f64)
    }

    /// `E sin(a_i - b_j)` as a matrix.
    fn sin_mean(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let (ca, sa) = (tape.cos(a)?, tape.sin(a)?);
        let (cb, sb) = (tape.cos(b)?, tape.sin(b)?);
        let cbt = tape.transpose(cb)?;
        let sbt = tape.transpose(sb)?;
        let l = tape.matmul(sa, cbt)?;
        let r = tape.matmul(ca, sbt)?;
        let k = tape.sub(l, r)?;
        tape.scale(k, 1.0 / self.num_freq_samples as f64)
    }

    /// Both expectation terms separately, `(term1, term2)`, each `n x m`.
    pub fn gram_terms(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<(Var, Var)> {
        let f = self.frequencies(tape, p)?;
        let (zx, gx) = self.all_phases(tape, p, x, &f)?;
        let (zy, gy) = if x == y { (zx, gx) } else { self.all_phases(tape, p, y, &f)? };
        let t1 = self.cos_mean(tape, zx, zy)?;
        let t2 = self.cos_mean(tape, gx, gy)?;
        Ok((t1, t2))
    }

    /// Entry `(i, j)` is `E sin(w1^T (h(y_i) - h(x_j))) + E sin(w2^T (h(y_i) - h(x_j)))`.
    pub fn k_sin(&self, tape: &mut Tape, p: &[Var], y: Var, x: Var) -> Result<Var> {
        let f = self.frequencies(tape, p)?;
        let (zy, gy) = self.all_phases(tape, p, y, &f)?;
        let (zx, gx) = self.all_phases(tape, p, x, &f)?;
        let a = self.sin_mean(tape, zy, zx)?;
        let b = self.sin_mean(tape, gy, gx)?;
        tape.add(a, b)
    }

    /// `mean |w1| + mean |w2(x_r, y_r)| + mean |d w2 / d h(x)|_F` over noise
    /// draws and matched rows. The Jacobian of the pair frequency with
    /// respect to `h(x)` is `diag(B) / 2`.
    pub fn frequency_norm_penalty(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let f = self.frequencies(tape, p)?;
        let g2 = tape.square(f.global)?;
        let g2 = tape.sum_cols(g2)?;
        let gn = tape.sqrt(g2)?;
        let global = tape.mean(gn)?;

        let hx = self.features(tape, p, x)?;
        let hy = self.features(tape, p, y)?;
        let m = tape.add(hx, hy)?;
        // |A + B m / 2|^2 = |A|^2 + m.(A*B) + (m*m).(B*B) / 4
        let a2 = tape.square(f.shift)?;
        let a2 = tape.sum_cols(a2)?;
        let a2 = tape.transpose(a2)?;
        let ab = tape.mul(f.shift, f.slope)?;
        let abt = tape.transpose(ab)?;
        let cross = tape.matmul(m, abt)?;
        let b2 = tape.square(f.slope)?;
        let b2t = tape.transpose(b2)?;
        let m2 = tape.square(m)?;
        let quad = tape.matmul(m2, b2t)?;
        let quad = tape.scale(quad, 0.25)?;
        let sq = tape.add(cross, quad)?;
        let sq = tape.add(sq, a2)?;
        let sq = tape.relu(sq)?;
        let pn = tape.sqrt(sq)?;
        let pair = tape.mean(pn)?;

        let bn = tape.sum_cols(b2)?;
        let bn = tape.sqrt(bn)?;
        let jac = tape.mean(bn)?;
        let jac = tape.scale(jac, 0.5)?;

        let s = tape.add(global, pair)?;
        tape.add(s, jac)
    }

    /// `(term1, term2)` at a single pair, without mixing.
    pub fn terms(&self, x0: &[f64], x: &[f64]) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let a = tape.leaf(Tensor::matrix(1, x0.len(), x0.to_vec())?)?;
        let b = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?)?;
        let (t1, t2) = self.gram_terms(&mut tape, &p, a, b)?;
        Ok((tape.value(t1).item(), tape.value(t2).item()))
    }

    pub fn noise(&self) -> (&Tensor, &Tensor) {
        (&self.noise_global, &self.noise_pair)
    }
}

impl Kernel for RandomFeatureKernel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn gram(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let (t1, t2) = self.gram_terms(tape, p, x, y)?;
        let k = tape.add(t1, t2)?;
        tape.scale(k, 0.5)
    }

    fn paired(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let f = self.frequencies(tape, p)?;
        let (zx, gx) = self.all_phases(tape, p, x, &f)?;
        let (zy, gy) = self.all_phases(tape, p, y, &f)?;
        let dz = tape.sub(zx, zy)?;
        let dg = tape.sub(gx, gy)?;
        let cz = tape.cos(dz)?;
        let cg = tape.cos(dg)?;
        let c = tape.add(cz, cg)?;
        let s = tape.sum_cols(c)?;
        tape.scale(s, 0.5 / self.num_freq_samples as f64)
    }

    fn resample(&mut self, rng: &mut dyn RngCore) {
        for t in [&mut self.noise_global, &mut self.noise_pair] {
            for v in t.data_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
    }
}

/// `k(x0, x)` under a fresh noise draw from `rng`. The kernel itself is not
/// modified.
pub fn random_feature_eval(
    kernel: &RandomFeatureKernel,
    x0: &[f64],
    x: &[f64],
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut k = kernel.clone();
    k.resample(rng);
    super::eval(&k, x0, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gram;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kernel(seed: u64) -> RandomFeatureKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = RandomFeatureConfig::new(2, 3);
        cfg.feature_hidden = vec![8];
        cfg.freq_hidden = vec![8];
        cfg.num_freq_samples = 16;
        RandomFeatureKernel::new(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn unit_diagonal() {
        let k = kernel(0);
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 0.4, 2.0, 2.0]).unwrap();
        let g = gram(&k, &x, &x, false).unwrap().values;
        for i in 0..3 {
            assert!((g.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exactly_symmetric() {
        let k = kernel(1);
        let a = [0.3, -0.7];
        let b = [1.1, 0.2];
        assert_eq!(super::super::eval(&k, &a, &b).unwrap(), super::super::eval(&k, &b, &a).unwrap());
    }

    #[test]
    fn sin_kernel_vanishes_on_diagonal() {
        let k = kernel(2);
        let mut tape = Tape::new();
        let p = k.store().bind(&mut tape).unwrap();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.5, 0.5, -0.5, 1.0]).unwrap()).unwrap();
        let s = k.k_sin(&mut tape, &p, x, x).unwrap();
        let s = tape.value(s);
        assert!(s.get(0, 0).abs() < 1e-12 && s.get(1, 1).abs() < 1e-12);
        assert!((s.get(0, 1) + s.get(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn paired_matches_gram_diagonal() {
        let k = kernel(3);
        let x = Tensor::matrix(2, 2, vec![0.5, 0.5, -0.5, 1.0]).unwrap();
        let y = Tensor::matrix(2, 2, vec![0.0, 1.5, 2.5, -1.0]).unwrap();
        let g = gram(&k, &x, &y, false).unwrap().values;
        let mut tape = Tape::new();
        let p = k.store().bind(&mut tape).unwrap();
        let (xv, yv) = (tape.leaf(x).unwrap(), tape.leaf(y).unwrap());
        let pv = k.paired(&mut tape, &p, xv, yv).unwrap();
        for i in 0..2 {
            assert!((tape.value(pv).get(i, 0) - g.get(i, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let k = kernel(4);
        let x = Tensor::matrix(2, 2, vec![0.5, 0.5, -0.5, 1.0]).unwrap();
        let y = Tensor::matrix(2, 2, vec![0.0, 1.5, 2.5, -1.0]).unwrap();
        let r = crate::autodiff::gradcheck(
            |t, v| {
                let p = k.store().bind(t)?;
                k.frequency_norm_penalty(t, &p, v[0], v[1])
            },
            &[x, y],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn bad_sample_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = RandomFeatureConfig::new(1, 2);
        cfg.num_freq_samples = 0;
        assert!(RandomFeatureKernel::new(&cfg, &mut rng).is_err());
    }
}
