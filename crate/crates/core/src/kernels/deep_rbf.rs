use rand::Rng;

use super::spectral::SpectralConfig;
use super::Kernel;
use crate::autodiff::{Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// `k(x, y) = exp(-|h(x) - h(y)|^2)` with a learned feature network `h`.
#[derive(Clone, Debug)]
pub struct DeepRbfKernel {
    pub feature_net: Mlp,
    store: ParamStore,
}

impl DeepRbfKernel {
    pub fn new(spec: MlpSpec, spectral: Option<SpectralConfig>, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let feature_net = Mlp::new(spec, &mut store, "h", rng)?.with_spectral(spectral);
        Ok(DeepRbfKernel { feature_net, store })
    }

    /// Identity features, i.e. the Gaussian kernel with bandwidth^2 = 1.
    pub fn identity(dim: usize) -> Self {
        let mut store = ParamStore::new();
        let feature_net = Mlp::identity(dim, &mut store, "h");
        DeepRbfKernel { feature_net, store }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.feature_net.output_dim()
    }

    pub fn features(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.feature_net.forward(tape, p, x)
    }

    /// Features and the per-row squared Frobenius norm of their Jacobian.
    pub fn features_with_jacobian(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        self.feature_net.forward_with_jacobian(tape, p, x)
    }

    /// Rescales the output layer so that the mean squared Jacobian norm over
    /// `x` is `1 / (2 width^2)`. For a linear 1-D feature map this makes
    /// `k(x0, .)` a Gaussian with standard deviation `width`.
    pub fn calibrate_width(&mut self, x: &Tensor, width: f64) -> Result<()> {
        if !(width.is_finite() && width > 0.0) {
            return Err(invalid(format!("width must be positive, got {width}")));
        }
        if self.feature_net.spectral.is_some() {
            return Err(invalid("width calibration would be undone by spectral normalization"));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let (_, jac) = self.features_with_jacobian(&mut tape, &p, xv)?;
        let mean = tape.value(jac).mean();
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::ZeroDenominator("calibrate_width"));
        }
        let c = (0.5 / (width * width * mean)).sqrt();
        let &(w, b) = self.feature_net.layers.last().expect("an mlp has at least one layer");
        for id in [w, b] {
            let scaled = self.store.get(id).map(|v| v * c);
            *self.store.get_mut(id) = scaled;
        }
        Ok(())
    }

    /// Gram matrix from precomputed features.
    pub fn gram_from_features(tape: &mut Tape, hx: Var, hy: Var) -> Result<Var> {
        let d = tape.sq_dist(hx, hy)?;
        let d = tape.neg(d)?;
        tape.exp(d)
    }
}

impl Kernel for DeepRbfKernel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn gram(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let hx = self.features(tape, p, x)?;
        let hy = if x == y { hx } else { self.features(tape, p, y)? };
        Self::gram_from_features(tape, hx, hy)
    }

    fn paired(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let hx = self.features(tape, p, x)?;
        let hy = self.features(tape, p, y)?;
        let diff = tape.sub(hx, hy)?;
        let sq = tape.square(diff)?;
        let s = tape.sum_cols(sq)?;
        let s = tape.neg(s)?;
        tape.exp(s)
    }

    /// Closed form `2 |J_h(x)|_F^2`.
    fn cross_trace(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let (_, jac) = self.features_with_jacobian(tape, p, x)?;
        tape.scale(jac, 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{eval, gram};
    use super::*;
    use crate::autodiff::{Activation, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> DeepRbfKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DeepRbfKernel::new(MlpSpec::new(vec![1, 8, 8, 2], Activation::Tanh), None, &mut rng).unwrap()
    }

    #[test]
    fn identity_reduces_to_gaussian() {
        let k = DeepRbfKernel::identity(2);
        let v = eval(&k, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn unit_diagonal_and_symmetry() {
        let k = net();
        let x = Tensor::matrix(4, 1, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let g = gram(&k, &x, &x, false).unwrap().values;
        for i in 0..4 {
            assert_eq!(g.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(g.get(i, j), g.get(j, i));
                assert!(g.get(i, j) > 0.0 && g.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn closed_form_trace_matches_finite_differences() {
        let k = net();
        let mut tape = Tape::new();
        let p = k.store().bind(&mut tape).unwrap();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![0.1, -0.4, 1.3]).unwrap()).unwrap();
        let closed = k.cross_trace(&mut tape, &p, x).unwrap();
        let closed = tape.value(closed).clone();
        for (r, &xi) in [0.1, -0.4, 1.3].iter().enumerate() {
            let fd = crate::autodiff::hessian_trace_cross(|a, b| eval(&k, a, b), &[xi], 1e-4).unwrap();
            assert!((closed.get(r, 0) - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn width_calibration_on_a_linear_map() {
        let mut k = DeepRbfKernel::new(MlpSpec::new(vec![1, 1], Activation::Identity), None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::matrix(3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        k.calibrate_width(&x, 0.5).unwrap();
        // std 0.5 means exp(-x^2 / 0.5)
        let v = eval(&k, &[0.0], &[0.7]).unwrap();
        assert!((v - (-0.49f64 / 0.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn paired_matches_gram_diagonal() {
        let k = net();
        let x = Tensor::matrix(3, 1, vec![0.5, 1.0, -2.0]).unwrap();
        let y = Tensor::matrix(3, 1, vec![-0.5, 0.2, 0.7]).unwrap();
        let g = gram(&k, &x, &y, false).unwrap().values;
        let mut tape = Tape::new();
        let p = k.store().bind(&mut tape).unwrap();
        let (xv, yv) = (tape.leaf(x).unwrap(), tape.leaf(y).unwrap());
        let pv = k.paired(&mut tape, &p, xv, yv).unwrap();
        for i in 0..3 {
            assert!((tape.value(pv).get(i, 0) - g.get(i, i)).abs() < 1e-15);
        }
    }
}
