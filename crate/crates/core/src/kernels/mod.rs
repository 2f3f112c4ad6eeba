//! Positive-definite kernels evaluated on the autodiff tape.
//!
//! Two learnable families are provided: [`DeepRbfKernel`], a Gaussian kernel
//! in the output space of a feature network, and [`RandomFeatureKernel`],
//! an average of cosine expectations over learned frequency distributions.
//! [`GaussianKernel`] and [`ConstantKernel`] are fixed baselines.

mod deep_rbf;
mod random_feature;
pub mod spectral;

use rand::RngCore;

pub use deep_rbf::DeepRbfKernel;
pub use random_feature::{random_feature_eval, Frequencies, RandomFeatureConfig, RandomFeatureKernel};
pub use spectral::{spectral_normalize, spectral_normalize_scaled, SpectralConfig, SpectralNormalized};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the finite-difference fallback of [`Kernel::cross_trace`].
pub const CROSS_TRACE_STEP: f64 = 1e-4;

pub trait Kernel: Send + Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Matrix with entry `(i, j) = k(x_i, y_j)`. `p` is `self.store()` bound
    /// to the same tape.
    fn gram(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var>;

    /// Column `k(x_r, y_r)` for matched rows.
    fn paired(&self, tape: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var>;

    /// `sum_i d^2 k(y, z) / dy_i dz_i` at `y = z = x_r`, one row per point.
    ///
    /// The default uses central differences through [`Kernel::paired`], so it
    /// stays differentiable with respect to the parameters.
    fn cross_trace(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let (n, d) = tape.value(x).dims();
        let h = CROSS_TRACE_STEP;
        let mut total = tape.leaf(Tensor::zeros(n, 1))?;
        for i in 0..d {
            let offset = tape.leaf(Tensor::from_fn(1, d, |_, j| if j == i { h } else { 0.0 }))?;
            let xp = tape.add(x, offset)?;
            let xm = tape.sub(x, offset)?;
            let pp = self.paired(tape, p, xp, xp)?;
            let pm = self.paired(tape, p, xp, xm)?;
            let mp = self.paired(tape, p, xm, xp)?;
            let mm = self.paired(tape, p, xm, xm)?;
            let a = tape.sub(pp, pm)?;
            let a = tape.sub(a, mp)?;
            let a = tape.add(a, mm)?;
            let a = tape.scale(a, 1.0 / (4.0 * h * h))?;
            total = tape.add(total, a)?;
        }
        Ok(total)
    }

    /// Draws fresh Monte Carlo samples, for kernels that use them.
    fn resample(&mut self, _rng: &mut dyn RngCore) {}
}

/// Evaluated Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: Tensor,
    /// True when `X == Y` and the diagonal was masked to zero.
    pub diag_excluded: bool,
}

impl GramMatrix {
    /// Mean over the unmasked entries.
    pub fn mean(&self) -> f64 {
        let (n, m) = self.values.dims();
        if self.diag_excluded {
            if n < 2 {
                return 0.0;
            }
            self.values.sum() / (n * (m - 1)) as f64
        } else {
            self.values.mean()
        }
    }
}

/// Evaluates `k(X_i, Y_j)` for all pairs. With `exclude_diag` and identical
/// inputs the diagonal is zeroed so that `mean()` averages over `i != j`.
pub fn gram<K: Kernel + ?Sized>(kernel: &K, x: &Tensor, y: &Tensor, exclude_diag: bool) -> Result<GramMatrix> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("gram"));
    }
    let mut tape = Tape::new();
    let p = kernel.store().bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let yv = if x == y { xv } else { tape.leaf(y.clone())? };
    let k = kernel.gram(&mut tape, &p, xv, yv)?;
    let mut values = tape.value(k).clone();
    let diag_excluded = exclude_diag && x == y;
    if diag_excluded {
        for i in 0..values.rows() {
            values.set(i, i, 0.0);
        }
    }
    Ok(GramMatrix {
        values,
        diag_excluded,
    })
}

/// Single evaluation `k(x0, x)`.
pub fn eval<K: Kernel + ?Sized>(kernel: &K, x0: &[f64], x: &[f64]) -> Result<f64> {
    if x0.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "kernel eval",
            lhs: vec![x0.len()],
            rhs: vec![x.len()],
        });
    }
    let a = Tensor::matrix(1, x0.len(), x0.to_vec())?;
    let b = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(gram(kernel, &a, &b, false)?.values.item())
}

/// `k(x, y) = c` everywhere.
#[derive(Clone, Debug, Default)]
pub struct ConstantKernel {
    pub value: f64,
    store: ParamStore,
}

impl ConstantKernel {
    pub fn new(value: f64) -> Self {
        ConstantKernel {
            value,
            store: ParamStore::new(),
        }
    }
}

impl Kernel for ConstantKernel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn gram(&self, tape: &mut Tape, _p: &[Var], x: Var, y: Var) -> Result<Var> {
        // 0 * distance keeps the inputs on the gradient path.
        let d = tape.sq_dist(x, y)?;
        let z = tape.scale(d, 0.0)?;
        tape.add_scalar(z, self.value)
    }
    fn paired(&self, tape: &mut Tape, _p: &[Var], x: Var, _y: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        tape.leaf(Tensor::filled(n, 1, self.value))
    }
    fn cross_trace(&self, tape: &mut Tape, _p: &[Var], x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        tape.leaf(Tensor::zeros(n, 1))
    }
}

/// `k(x, y) = exp(-|x - y|^2 / bandwidth_sq)`.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    pub bandwidth_sq: f64,
    store: ParamStore,
}

impl GaussianKernel {
    pub fn new(bandwidth_sq: f64) -> Result<Self> {
        if !(bandwidth_sq.is_finite() && bandwidth_sq > 0.0) {
            return Err(crate::error::invalid(format!(
                "bandwidth^2 must be positive, got {bandwidth_sq}"
            )));
        }
        Ok(GaussianKernel {
            bandwidth_sq,
            store: ParamStore::new(),
        })
    }
}

impl Kernel for GaussianKernel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn gram(&self, tape: &mut Tape, _p: &[Var], x: Var, y: Var) -> Result<Var> {
        let d = tape.sq_dist(x, y)?;
        let s = tape.scale(d, -1.0 / self.bandwidth_sq)?;
        tape.exp(s)
    }
    fn paired(&self, tape: &mut Tape, _p: &[Var], x: Var, y: Var) -> Result<Var> {
        let diff = tape.sub(x, y)?;
        let sq = tape.square(diff)?;
        let s = tape.sum_cols(sq)?;
        let s = tape.scale(s, -1.0 / self.bandwidth_sq)?;
        tape.exp(s)
    }
    fn cross_trace(&self, tape: &mut Tape, _p: &[Var], x: Var) -> Result<Var> {
        let (n, d) = tape.value(x).dims();
        tape.leaf(Tensor::filled(n, 1, 2.0 * d as f64 / self.bandwidth_sq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_gram() {
        let k = GaussianKernel::new(1.0).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, -0.1]).unwrap();
        assert_eq!(gram(&k, &x, &x, false).unwrap().values.data(), &[1.0]);
    }

    #[test]
    fn gaussian_value() {
        let k = GaussianKernel::new(1.0).unwrap();
        let v = eval(&k, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!(GaussianKernel::new(0.0).is_err());
    }

    #[test]
    fn empty_input_rejected() {
        let k = ConstantKernel::new(1.0);
        let x = Tensor::zeros(1, 1);
        let e = Tensor::new(vec![1], vec![]);
        assert!(e.is_err());
        assert!(gram(&k, &x, &x, true).is_ok());
    }

    #[test]
    fn masked_mean_excludes_diagonal() {
        let k = ConstantKernel::new(0.5);
        let x = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let g = gram(&k, &x, &x, true).unwrap();
        assert!(g.diag_excluded);
        assert_eq!(g.values.get(1, 1), 0.0);
        assert!((g.mean() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_trace_matches_closed_form() {
        let k = GaussianKernel::new(0.7).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap())
            .unwrap();
        let closed = k.cross_trace(&mut tape, &[], x).unwrap();
        let fd = Kernel::cross_trace(&FdOnly(k.clone()), &mut tape, &[], x).unwrap();
        for (a, b) in tape.value(closed).data().iter().zip(tape.value(fd).data()) {
            assert!((a - b).abs() / a < 1e-6, "{a} vs {b}");
        }
    }

    struct FdOnly(GaussianKernel);
    impl Kernel for FdOnly {
        fn store(&self) -> &ParamStore {
            self.0.store()
        }
        fn store_mut(&mut self) -> &mut ParamStore {
            self.0.store_mut()
        }
        fn gram(&self, t: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
            self.0.gram(t, p, x, y)
        }
        fn paired(&self, t: &mut Tape, p: &[Var], x: Var, y: Var) -> Result<Var> {
            self.0.paired(t, p, x, y)
        }
    }
}
