//! Kernel-based generative modelling on low-dimensional data: MMD and scaled
//! MMD losses, the two-sample kernel-learning objective with its Taylor-bound
//! regularizers, and the alternating generator/kernel training loop.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AdamConfig, AdamState, Init, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::hklearn::{kde_weights, neg_entropy_op, off_diagonal_mean, EntropyEstimator, MeasureSnapshot};
use crate::kernels::{DeepRbfKernel, GaussianKernel, Kernel, RandomFeatureConfig, RandomFeatureKernel, SpectralConfig};
use crate::transport::{sinkhorn_op, SinkhornConfig};

/// How same-sample kernel averages treat the diagonal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Diagonal included (V-statistic).
    #[default]
    Biased,
    /// Diagonal excluded (U-statistic).
    Unbiased,
}

fn same_mean(tape: &mut Tape, gram: Var, est: Estimator) -> Result<Var> {
    match est {
        Estimator::Biased => tape.mean(gram),
        Estimator::Unbiased => {
            if tape.value(gram).rows() < 2 {
                return Err(invalid("the unbiased estimator needs at least two points per batch"));
            }
            off_diagonal_mean(tape, gram)
        }
    }
}

fn check_batches(x: &Tensor, y: &Tensor, est: Estimator) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("sample batch"));
    }
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "sample batches",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if est == Estimator::Unbiased && (x.rows() < 2 || y.rows() < 2) {
        return Err(invalid("the unbiased estimator needs at least two points per batch"));
    }
    Ok(())
}

/// `E k(x, x') + E k(y, y') - 2 E k(x, y)` on the tape.
pub fn mmd2_op<K: Kernel + ?Sized>(
    tape: &mut Tape,
    kernel: &K,
    p: &[Var],
    x: Var,
    y: Var,
    est: Estimator,
) -> Result<Var> {
    let kxx = kernel.gram(tape, p, x, x)?;
    let kyy = kernel.gram(tape, p, y, y)?;
    let kxy = kernel.gram(tape, p, x, y)?;
    let a = same_mean(tape, kxx, est)?;
    let b = same_mean(tape, kyy, est)?;
    let c = tape.mean(kxy)?;
    let c = tape.scale(c, 2.0)?;
    let s = tape.add(a, b)?;
    tape.sub(s, c)
}

fn with_batches<K: Kernel + ?Sized, T>(
    kernel: &K,
    x: &Tensor,
    y: &Tensor,
    f: impl FnOnce(&mut Tape, &[Var], Var, Var) -> Result<Var>,
    read: impl FnOnce(&Tape, Var) -> T,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = kernel.store().bind(&mut tape)?;
    let xv = tape.leaf(x.as_matrix())?;
    let yv = tape.leaf(y.as_matrix())?;
    let out = f(&mut tape, &p, xv, yv)?;
    Ok(read(&tape, out))
}

pub fn mmd2<K: Kernel + ?Sized>(kernel: &K, x: &Tensor, y: &Tensor, est: Estimator) -> Result<f64> {
    check_batches(x, y, est)?;
    with_batches(kernel, x, y, |t, p, a, b| mmd2_op(t, kernel, p, a, b, est), |t, v| t.value(v).item())
}

/// `1 / (zeta + E k(x, x) + E tr d^2 k / dy dz |_(x, x))` over the real batch.
pub fn smmd_sigma_op<K: Kernel + ?Sized>(tape: &mut Tape, kernel: &K, p: &[Var], x: Var, zeta: f64) -> Result<Var> {
    let diag = kernel.paired(tape, p, x, x)?;
    let diag = tape.mean(diag)?;
    let tr = kernel.cross_trace(tape, p, x)?;
    let tr = tape.mean(tr)?;
    let d = tape.add(diag, tr)?;
    let d = tape.add_scalar(d, zeta)?;
    if !(tape.value(d).item() > 0.0) {
        return Err(Error::ZeroDenominator("smmd scale"));
    }
    let one = tape.scalar(1.0)?;
    tape.div(one, d)
}

/// SMMD scale factor. `zeta = 0` is accepted here as long as the
/// denominator stays positive.
pub fn smmd_sigma<K: Kernel + ?Sized>(kernel: &K, x: &Tensor, zeta: f64) -> Result<f64> {
    if !(zeta >= 0.0) {
        return Err(invalid(format!("zeta must be non-negative, got {zeta}")));
    }
    if x.is_empty() {
        return Err(Error::Empty("smmd_sigma"));
    }
    with_batches(kernel, x, x, |t, p, a, _| smmd_sigma_op(t, kernel, p, a, zeta), |t, v| t.value(v).item())
}

pub fn smmd2_op<K: Kernel + ?Sized>(
    tape: &mut Tape,
    kernel: &K,
    p: &[Var],
    x: Var,
    y: Var,
    zeta: f64,
    est: Estimator,
) -> Result<Var> {
    let s = smmd_sigma_op(tape, kernel, p, x, zeta)?;
    let m = mmd2_op(tape, kernel, p, x, y, est)?;
    tape.mul(s, m)
}

/// `sigma * MMD^2` with the scale taken on the real batch `x`.
pub fn smmd2<K: Kernel + ?Sized>(kernel: &K, x: &Tensor, y: &Tensor, zeta: f64, est: Estimator) -> Result<f64> {
    if !(zeta > 0.0) {
        return Err(invalid(format!("zeta must be positive, got {zeta}")));
    }
    check_batches(x, y, est)?;
    with_batches(kernel, x, y, |t, p, a, b| smmd2_op(t, kernel, p, a, b, zeta, est), |t, v| t.value(v).item())
}

/// `(E_QQ k + 2 E_PQ k + E_PP k) / 4`, the average of `k` over pairs drawn
/// from the pooled batch.
pub fn pair_expectation_op<K: Kernel + ?Sized>(
    tape: &mut Tape,
    kernel: &K,
    p: &[Var],
    x: Var,
    y: Var,
    est: Estimator,
) -> Result<Var> {
    let kxx = kernel.gram(tape, p, x, x)?;
    let kyy = kernel.gram(tape, p, y, y)?;
    let kxy = kernel.gram(tape, p, y, x)?;
    pair_from_blocks(tape, kxx, kyy, kxy, est)
}

fn pair_from_blocks(tape: &mut Tape, kxx: Var, kyy: Var, kyx: Var, est: Estimator) -> Result<Var> {
    let a = same_mean(tape, kyy, est)?;
    let b = tape.mean(kyx)?;
    let b = tape.scale(b, 2.0)?;
    let c = same_mean(tape, kxx, est)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, c)?;
    tape.scale(s, 0.25)
}

/// With [`Estimator::Unbiased`] the same-set means exclude self-pairs.
pub fn pair_expectation<K: Kernel + ?Sized>(kernel: &K, x: &Tensor, y: &Tensor, est: Estimator) -> Result<f64> {
    check_batches(x, y, est)?;
    with_batches(kernel, x, y, |t, p, a, b| pair_expectation_op(t, kernel, p, a, b, est), |t, v| {
        t.value(v).item()
    })
}

/// Components of the first-order bound on how far `k(., x)` can drift off the
/// manifold, `k(y, x) |J_h(x)|_F |h(x) - h(y)|` with the unobservable
/// distance-to-manifold constant set to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorBound {
    pub kernel_value: f64,
    pub jacobian_norm: f64,
    pub feature_distance: f64,
    pub bound: f64,
}

pub fn taylor_bound_rbf(kernel: &DeepRbfKernel, x: &[f64], y: &[f64]) -> Result<TaylorBound> {
    if x.len() != y.len() || x.len() != kernel.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "taylor_bound_rbf",
            lhs: vec![x.len(), y.len()],
            rhs: vec![kernel.input_dim()],
        });
    }
    let mut tape = Tape::new();
    let p = kernel.store().bind(&mut tape)?;
    let xv = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?)?;
    let yv = tape.leaf(Tensor::matrix(1, y.len(), y.to_vec())?)?;
    let (hx, jac) = kernel.features_with_jacobian(&mut tape, &p, xv)?;
    let hy = kernel.features(&mut tape, &p, yv)?;
    let d2 = tape.sq_dist(hy, hx)?;
    let d2 = tape.value(d2).item();
    let kernel_value = (-d2).exp();
    let jacobian_norm = tape.value(jac).item().sqrt();
    let feature_distance = d2.sqrt();
    Ok(TaylorBound {
        kernel_value,
        jacobian_norm,
        feature_distance,
        bound: kernel_value * jacobian_norm * feature_distance,
    })
}

/// Euclidean distances between rows, with a zero subgradient where two
/// rows coincide.
fn distances(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d2 = tape.sq_dist(a, b)?;
    let v = tape.value(d2);
    let (r, c) = v.dims();
    let zero = Tensor::from_fn(r, c, |i, j| if v.get(i, j) == 0.0 { 1.0 } else { 0.0 });
    let keep = zero.map(|z| 1.0 - z);
    let zero = tape.leaf(zero)?;
    let keep = tape.leaf(keep)?;
    let shifted = tape.add(d2, zero)?;
    let d = tape.sqrt(shifted)?;
    tape.mul(d, keep)
}

fn block(tape: &mut Tape, g: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
    let rows = tape.slice_rows(g, r0, nr)?;
    tape.slice_cols(rows, c0, nc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanLoss {
    Mmd,
    Smmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    DeepRbf,
    RandomFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub loss: GanLoss,
    pub kernel_family: KernelFamily,
    pub generator_steps: usize,
    /// Kernel updates per generator update.
    pub kernel_steps: usize,
    pub batch_size: usize,
    /// Multiply the kernel objective by the SMMD scale. When off, the
    /// feature net is spectrally normalized instead.
    pub scale_kernel_objective: bool,
    pub estimator: Estimator,
    pub entropy_estimator: EntropyEstimator,
    pub sinkhorn: SinkhornConfig,
    pub noise_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub feature_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub spectral: SpectralConfig,
    pub kernel_adam: AdamConfig,
    pub generator_adam: AdamConfig,
    /// Record metrics every this many generator steps (and at the last).
    pub log_every: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            gamma1: 4.0,
            gamma2: 0.0,
            gamma3: 0.0,
            gamma4: 0.0,
            gamma5: 0.0,
            alpha: 0.1,
            beta: 0.1,
            lambda: 4.0,
            zeta: 1.0,
            loss: GanLoss::Mmd,
            kernel_family: KernelFamily::DeepRbf,
            generator_steps: 2000,
            kernel_steps: 1,
            batch_size: 64,
            scale_kernel_objective: false,
            estimator: Estimator::Biased,
            entropy_estimator: EntropyEstimator::PluginA,
            sinkhorn: SinkhornConfig::default(),
            noise_dim: 8,
            generator_hidden: vec![64, 64],
            feature_hidden: vec![32, 32],
            feature_dim: 16,
            spectral: SpectralConfig::default(),
            kernel_adam: AdamConfig::with_lr(1e-3),
            generator_adam: AdamConfig::with_lr(1e-3),
            log_every: 50,
        }
    }
}

impl GanConfig {
    /// Every weight zero: useful as a base for hand-built objectives.
    pub fn zero_weights() -> Self {
        GanConfig {
            gamma1: 0.0,
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            ..GanConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.gamma1,
            self.gamma2,
            self.gamma3,
            self.gamma4,
            self.gamma5,
            self.alpha,
            self.beta,
            self.lambda,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("objective weights must be finite and non-negative"));
        }
        let smmd_used = self.loss == GanLoss::Smmd || self.scale_kernel_objective;
        if smmd_used && !(self.zeta > 0.0) {
            return Err(invalid("zeta must be positive when the SMMD scale is used"));
        }
        if self.batch_size < 2 || self.noise_dim == 0 || self.feature_dim == 0 {
            return Err(invalid("batch size must be at least 2, noise and feature dims positive"));
        }
        if self.kernel_family == KernelFamily::RandomFeature && self.gamma5 > 0.0 && self.batch_size == 0 {
            return Err(invalid("frequency penalty needs matched batches"));
        }
        Ok(())
    }
}

/// Kernels that can enter the generative objective.
pub trait GanKernel: Kernel + Clone {
    fn feature_map(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var>;

    /// Gram of the pooled batch, given its features and raw points.
    fn pooled_gram(&self, tape: &mut Tape, p: &[Var], hz: Var, z: Var) -> Result<Var>;

    /// Matrix entering the weighted pairing terms, rows `a`, columns `b`.
    /// `gram` is the matching block of the pooled Gram matrix.
    fn pairing(&self, tape: &mut Tape, p: &[Var], a: Var, b: Var, gram: Var) -> Result<Var>;

    /// Unweighted extra regularizer over matched rows of `x` and `y`.
    fn regularizer(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Option<Var>>;
}

impl GanKernel for DeepRbfKernel {
    fn feature_map(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.features(tape, p, x)
    }
    fn pooled_gram(&self, tape: &mut Tape, _p: &[Var], hz: Var, _z: Var) -> Result<Var> {
        DeepRbfKernel::gram_from_features(tape, hz, hz)
    }
    fn pairing(&self, _tape: &mut Tape, _p: &[Var], _a: Var, _b: Var, gram: Var) -> Result<Var> {
        Ok(gram)
    }
    fn regularizer(&self, _tape: &mut Tape, _p: &[Var], _x: Var, _y: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

impl GanKernel for RandomFeatureKernel {
    fn feature_map(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.features(tape, p, x)
    }
    fn pooled_gram(&self, tape: &mut Tape, p: &[Var], _hz: Var, z: Var) -> Result<Var> {
        self.gram(tape, p, z, z)
    }
    fn pairing(&self, tape: &mut Tape, p: &[Var], a: Var, b: Var, _gram: Var) -> Result<Var> {
        self.k_sin(tape, p, a, b)
    }
    fn regularizer(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Option<Var>> {
        let n = tape.value(x).rows().min(tape.value(y).rows());
        let xs = tape.slice_rows(x, 0, n)?;
        let ys = tape.slice_rows(y, 0, n)?;
        Ok(Some(self.frequency_norm_penalty(tape, p, xs, ys)?))
    }
}

/// Parts of the kernel objective on the tape.
#[derive(Clone, Copy, Debug)]
pub struct KernelObjectiveVars {
    pub total: Var,
    pub entropy: Option<Var>,
    pub wasserstein: Option<Var>,
    pub pair: Var,
    pub sigma: Option<Var>,
}

/// `alpha H(mu) + beta W2^2(nu, mu) - lambda pair + gamma1 E_PQ k + gamma2
/// E_PQ |h(x) - h(y)| + gamma3 E_PP k + gamma4 E_PP |h(x) - h(x')| (+ gamma5
/// frequency norms)`, where `mu` is the normalized KDE on the pooled batch
/// `[x; y]` and `nu` a fixed measure. Terms with zero weight are skipped.
#[allow(clippy::too_many_arguments)]
pub fn kernel_objective_op<K: GanKernel>(
    tape: &mut Tape,
    kernel: &K,
    p: &[Var],
    x: Var,
    y: Var,
    nu: Option<&MeasureSnapshot>,
    cfg: &GanConfig,
) -> Result<KernelObjectiveVars> {
    let (n, m) = (tape.value(x).rows(), tape.value(y).rows());
    let est = cfg.estimator;
    let z = tape.concat_rows(x, y)?;
    let hz = kernel.feature_map(tape, p, z)?;
    let g = kernel.pooled_gram(tape, p, hz, z)?;
    let kxx = block(tape, g, 0, n, 0, n)?;
    let kyy = block(tape, g, n, m, n, m)?;
    let kyx = block(tape, g, n, m, 0, n)?;
    let pair = pair_from_blocks(tape, kxx, kyy, kyx, est)?;
    let mut total = tape.scale(pair, -cfg.lambda)?;

    let (mut entropy, mut wasserstein) = (None, None);
    if cfg.alpha > 0.0 || cfg.beta > 0.0 {
        let mu = kde_weights(tape, g)?;
        if cfg.alpha > 0.0 {
            let h = neg_entropy_op(tape, mu, g, cfg.entropy_estimator)?;
            let t = tape.scale(h, cfg.alpha)?;
            total = tape.add(total, t)?;
            entropy = Some(h);
        }
        if cfg.beta > 0.0 {
            let nu = nu.ok_or_else(|| invalid("the Wasserstein term needs a reference measure"))?;
            let s: f64 = nu.weights.iter().sum();
            let nv = tape.leaf(Tensor::column(&nu.weights.iter().map(|w| w / s).collect::<Vec<_>>()))?;
            let np = tape.leaf(nu.points.clone())?;
            let c = tape.sq_dist(np, z)?;
            let w = sinkhorn_op(tape, nv, mu, c, &cfg.sinkhorn)?;
            let t = tape.scale(w, cfg.beta)?;
            total = tape.add(total, t)?;
            wasserstein = Some(w);
        }
    }
    if cfg.gamma1 > 0.0 {
        let k = kernel.pairing(tape, p, y, x, kyx)?;
        let k = tape.mean(k)?;
        let t = tape.scale(k, cfg.gamma1)?;
        total = tape.add(total, t)?;
    }
    if cfg.gamma3 > 0.0 {
        let k = kernel.pairing(tape, p, x, x, kxx)?;
        let k = same_mean(tape, k, est)?;
        let t = tape.scale(k, cfg.gamma3)?;
        total = tape.add(total, t)?;
    }
    if cfg.gamma2 > 0.0 || cfg.gamma4 > 0.0 {
        let hx = tape.slice_rows(hz, 0, n)?;
        if cfg.gamma2 > 0.0 {
            let hy = tape.slice_rows(hz, n, m)?;
            let d = distances(tape, hx, hy)?;
            let d = tape.mean(d)?;
            let t = tape.scale(d, cfg.gamma2)?;
            total = tape.add(total, t)?;
        }
        if cfg.gamma4 > 0.0 {
            let d = distances(tape, hx, hx)?;
            let d = same_mean(tape, d, est)?;
            let t = tape.scale(d, cfg.gamma4)?;
            total = tape.add(total, t)?;
        }
    }
    if cfg.gamma5 > 0.0 {
        if let Some(r) = kernel.regularizer(tape, p, x, y)? {
            let t = tape.scale(r, cfg.gamma5)?;
            total = tape.add(total, t)?;
        }
    }
    let mut sigma = None;
    if cfg.scale_kernel_objective {
        let s = smmd_sigma_op(tape, kernel, p, x, cfg.zeta)?;
        total = tape.mul(total, s)?;
        sigma = Some(s);
    }
    Ok(KernelObjectiveVars {
        total,
        entropy,
        wasserstein,
        pair,
        sigma,
    })
}

fn objective_value<K: GanKernel>(
    kernel: &K,
    x: &Tensor,
    y: &Tensor,
    nu: Option<&MeasureSnapshot>,
    cfg: &GanConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_batches(x, y, cfg.estimator)?;
    with_batches(kernel, x, y, |t, p, a, b| Ok(kernel_objective_op(t, kernel, p, a, b, nu, cfg)?.total), |t, v| {
        t.value(v).item()
    })
}

/// Objective for the deep-RBF family.
pub fn kernel_objective_rbf(
    kernel: &DeepRbfKernel,
    x: &Tensor,
    y: &Tensor,
    nu: Option<&MeasureSnapshot>,
    cfg: &GanConfig,
) -> Result<f64> {
    objective_value(kernel, x, y, nu, cfg)
}

/// Objective for the random-feature family: the pairing terms use the sine
/// kernel and `gamma5` weights the frequency-norm bound.
pub fn kernel_objective_dk(
    kernel: &RandomFeatureKernel,
    x: &Tensor,
    y: &Tensor,
    nu: Option<&MeasureSnapshot>,
    cfg: &GanConfig,
) -> Result<f64> {
    objective_value(kernel, x, y, nu, cfg)
}

/// MLP generator driven by standard normal noise.
#[derive(Clone, Debug)]
pub struct Generator {
    pub net: Mlp,
    pub store: ParamStore,
}

impl Generator {
    pub fn new(noise_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![noise_dim];
        widths.extend(hidden);
        widths.push(output_dim);
        let mut spec = MlpSpec::new(widths, Activation::Relu);
        spec.init = Init::HeUniform;
        let mut store = ParamStore::new();
        let net = Mlp::new(spec, &mut store, "g", rng)?;
        Ok(Generator { net, store })
    }

    pub fn noise_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn noise(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(n, self.noise_dim(), |_, _| StandardNormal.sample(rng))
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], noise: Var) -> Result<Var> {
        self.net.forward(tape, p, noise)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.net.eval(&self.store, &self.noise(n, rng))
    }
}

/// Source of training points.
pub trait PointSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Tensor;
}

/// Equal mixture of isotropic Gaussians on a circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRing {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for GaussianRing {
    fn default() -> Self {
        GaussianRing {
            modes: 8,
            radius: 2.0,
            std: 0.02,
        }
    }
}

impl GaussianRing {
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.modes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / self.modes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }
}

impl PointSampler for GaussianRing {
    fn dim(&self) -> usize {
        2
    }
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let c = self.centers();
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let k = rng.random_range(0..self.modes);
            let e: [f64; 2] = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
            data.push(c[k][0] + self.std * e[0]);
            data.push(c[k][1] + self.std * e[1]);
        }
        Tensor::matrix(n, 2, data).expect("two coordinates per sample")
    }
}

/// A single isotropic Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlob {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl PointSampler for GaussianBlob {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let d = self.mean.len();
        let normal = Normal::new(0.0, self.std).unwrap_or_else(|_| Normal::new(0.0, 1.0).expect("unit normal"));
        Tensor::from_fn(n, d, |_, j| self.mean[j] + normal.sample(rng))
    }
}

/// Fraction of `samples` whose nearest center is each of `centers`.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]]) -> Result<Vec<f64>> {
    if samples.cols() != 2 || centers.is_empty() {
        return Err(invalid("mode coverage needs 2-D samples and at least one center"));
    }
    let mut counts = vec![0usize; centers.len()];
    for i in 0..samples.rows() {
        let (px, py) = (samples.get(i, 0), samples.get(i, 1));
        let best = (0..centers.len())
            .min_by(|&a, &b| {
                let da = (px - centers[a][0]).powi(2) + (py - centers[a][1]).powi(2);
                let db = (px - centers[b][0]).powi(2) + (py - centers[b][1]).powi(2);
                da.total_cmp(&db)
            })
            .expect("centers is non-empty");
        counts[best] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / samples.rows() as f64).collect())
}

/// Unbiased MMD^2 under the fixed kernel `exp(-|x - y|^2)`.
pub fn evaluation_mmd2(x: &Tensor, y: &Tensor) -> Result<f64> {
    mmd2(&GaussianKernel::new(1.0)?, x, y, Estimator::Unbiased)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanMetrics {
    pub epoch: usize,
    pub kernel_objective: f64,
    pub mmd2: f64,
    pub smmd_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct DgmRun {
    pub generator: Generator,
    pub trajectory: Vec<GanMetrics>,
    /// Why training stopped early, if it did.
    pub divergence: Option<String>,
}

impl DgmRun {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,kernel_objective,mmd2,smmd_sigma\n");
        for m in &self.trajectory {
            s.push_str(&format!("{},{:.10e},{:.10e},{:.10e}\n", m.epoch, m.kernel_objective, m.mmd2, m.smmd_sigma));
        }
        s
    }
}

fn all_finite(gs: &[Tensor]) -> bool {
    gs.iter().all(|g| g.is_finite())
}

/// Alternating training: each epoch runs `kernel_steps` Adam steps on the
/// kernel objective (each against a fresh snapshot of the current KDE), then
/// one generator step on MMD or SMMD under the current kernel.
pub fn train_dgm(data: &dyn PointSampler, cfg: &GanConfig, rng: &mut impl Rng) -> Result<DgmRun> {
    cfg.validate()?;
    let d = data.dim();
    let generator = Generator::new(cfg.noise_dim, &cfg.generator_hidden, d, rng)?;
    let spectral = (!cfg.scale_kernel_objective).then_some(cfg.spectral);
    match cfg.kernel_family {
        KernelFamily::DeepRbf => {
            let mut widths = vec![d];
            widths.extend(&cfg.feature_hidden);
            widths.push(cfg.feature_dim);
            let k = DeepRbfKernel::new(MlpSpec::new(widths, Activation::Relu), spectral, rng)?;
            train_with(data, generator, k, cfg, rng)
        }
        KernelFamily::RandomFeature => {
            let mut rf = RandomFeatureConfig::new(d, cfg.feature_dim);
            rf.feature_hidden = cfg.feature_hidden.clone();
            rf.spectral = spectral;
            let k = RandomFeatureKernel::new(&rf, rng)?;
            train_with(data, generator, k, cfg, rng)
        }
    }
}

/// [`train_dgm`] with a caller-supplied kernel.
pub fn train_with<K: GanKernel>(
    data: &dyn PointSampler,
    mut generator: Generator,
    mut kernel: K,
    cfg: &GanConfig,
    rng: &mut impl Rng,
) -> Result<DgmRun> {
    cfg.validate()?;
    if generator.output_dim() != data.dim() {
        return Err(invalid("generator output does not match the data dimension"));
    }
    let b = cfg.batch_size;
    let mut k_opt = AdamState::new(kernel.store(), cfg.kernel_adam);
    let mut g_opt = AdamState::new(&generator.store, cfg.generator_adam);
    let mut trajectory = Vec::new();
    let mut last_objective = f64::NAN;

    for epoch in 0..cfg.generator_steps {
        for _ in 0..cfg.kernel_steps {
            let x = data.sample(b, rng);
            let y = generator.sample(b, rng)?;
            kernel.resample(rng);
            let nu = if cfg.beta > 0.0 {
                let z = x.concat_rows(&y)?;
                let w = crate::hklearn::normalized_kde(&kernel, &z)?;
                Some(MeasureSnapshot::new(w, z)?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let p = kernel.store().bind(&mut tape)?;
            let xv = tape.leaf(x)?;
            let yv = tape.leaf(y)?;
            let o = match kernel_objective_op(&mut tape, &kernel, &p, xv, yv, nu.as_ref(), cfg) {
                Ok(o) => o,
                Err(e) => return Ok(diverged(generator, trajectory, epoch, e.to_string())),
            };
            last_objective = tape.value(o.total).item();
            let grads = tape.backward(o.total)?;
            let gs = kernel.store().collect_grads(&tape, &grads, &p);
            if !last_objective.is_finite() || !all_finite(&gs) {
                return Ok(diverged(generator, trajectory, epoch, "non-finite kernel objective".into()));
            }
            k_opt.step(kernel.store_mut(), &gs)?;
        }

        let x = data.sample(b, rng);
        let noise = generator.noise(b, rng);
        kernel.resample(rng);
        let mut tape = Tape::new();
        let gp = generator.store.bind(&mut tape)?;
        let kp = kernel.store().bind(&mut tape)?;
        let xv = tape.leaf(x)?;
        let zv = tape.leaf(noise)?;
        let yv = generator.forward(&mut tape, &gp, zv)?;
        let mmd = mmd2_op(&mut tape, &kernel, &kp, xv, yv, cfg.estimator)?;
        let (loss, sigma) = match cfg.loss {
            GanLoss::Mmd => (mmd, None),
            GanLoss::Smmd => {
                let s = smmd_sigma_op(&mut tape, &kernel, &kp, xv, cfg.zeta)?;
                (tape.mul(s, mmd)?, Some(s))
            }
        };
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let gs = generator.store.collect_grads(&tape, &grads, &gp);
        if !value.is_finite() || !all_finite(&gs) {
            return Ok(diverged(generator, trajectory, epoch, "non-finite generator loss".into()));
        }
        g_opt.step(&mut generator.store, &gs)?;

        let log_every = cfg.log_every.max(1);
        if epoch % log_every == 0 || epoch + 1 == cfg.generator_steps {
            trajectory.push(GanMetrics {
                epoch,
                kernel_objective: last_objective,
                mmd2: tape.value(mmd).item(),
                smmd_sigma: sigma.map_or(f64::NAN, |s| tape.value(s).item()),
            });
        }
    }
    Ok(DgmRun {
        generator,
        trajectory,
        divergence: None,
    })
}

fn diverged(generator: Generator, trajectory: Vec<GanMetrics>, epoch: usize, reason: String) -> DgmRun {
    DgmRun {
        generator,
        trajectory,
        divergence: Some(Error::Diverged { step: epoch, reason }.to_string()),
    }
}
