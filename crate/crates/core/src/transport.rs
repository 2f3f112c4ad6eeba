//! Entropic optimal transport with squared Euclidean cost.
//!
//! [`sinkhorn`] is a plain solver with a convergence check. [`sinkhorn_op`]
//! records the same log-domain iterations as one fused tape node whose
//! backward pass replays them in reverse, so the gradient is exact for the
//! unrolled computation while memory stays `O(L (n + m))` instead of
//! `O(L n m)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Probability weights over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub const SUM_TOL: f64 = 1e-10;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("DiscreteMeasure"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("measure weights must be finite and non-negative"));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(invalid(format!("measure weights sum to {s}, expected 1")));
        }
        Ok(DiscreteMeasure { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("DiscreteMeasure::uniform"));
        }
        Ok(DiscreteMeasure {
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Rescales non-negative masses to sum to one.
    pub fn normalized(masses: &[f64]) -> Result<Self> {
        let s: f64 = masses.iter().sum();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::ZeroDenominator("DiscreteMeasure::normalized"));
        }
        Self::new(masses.iter().map(|m| m / s).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Non-negative `n x m` cost, squared Euclidean distance between supports.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Tensor,
}

impl CostMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.data().iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid("cost entries must be finite and non-negative"));
        }
        Ok(CostMatrix {
            values: values.as_matrix(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            values: self.values.transpose(),
        }
    }
}

/// `C[i][j] = |X_i - Y_j|^2`.
pub fn cost_matrix(x: &Tensor, y: &Tensor) -> Result<CostMatrix> {
    let (x, y) = (x.as_matrix(), y.as_matrix());
    if x.is_empty() || y.is_empty() {
        return Err(Error::Empty("cost_matrix"));
    }
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "cost_matrix",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let values = Tensor::from_fn(x.rows(), y.rows(), |i, j| {
        x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    });
    CostMatrix::new(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Absolute regularization. When absent, `eps_relative * mean(C)`.
    #[serde(default)]
    pub eps_reg: Option<f64>,
    #[serde(default = "default_eps_relative")]
    pub eps_relative: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop once the L1 row-marginal violation falls below this. Zero runs
    /// all `max_iter` iterations.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_eps_relative() -> f64 {
    0.05
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-9
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            eps_reg: None,
            eps_relative: default_eps_relative(),
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }
}

impl SinkhornConfig {
    pub fn relative(eps_relative: f64, max_iter: usize, tol: f64) -> Self {
        SinkhornConfig {
            eps_reg: None,
            eps_relative,
            max_iter,
            tol,
        }
    }

    pub fn absolute(eps_reg: f64, max_iter: usize, tol: f64) -> Self {
        SinkhornConfig {
            eps_reg: Some(eps_reg),
            eps_relative: default_eps_relative(),
            max_iter,
            tol,
        }
    }

    /// Regularization for a given cost. A zero cost falls back to
    /// `eps_relative` itself.
    pub fn eps_for(&self, cost: &Tensor) -> Result<f64> {
        let eps = match self.eps_reg {
            Some(e) => e,
            None => {
                let m = cost.mean();
                self.eps_relative * if m > 0.0 { m } else { 1.0 }
            }
        };
        if !(eps.is_finite() && eps > 0.0) {
            return Err(invalid(format!("eps_reg must be positive, got {eps}")));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        Ok(eps)
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// `sum_ij plan_ij C_ij`.
    pub distance: f64,
    pub plan: Tensor,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// L1 row-marginal violation after each iteration. Columns match
    /// exactly after every `g` update.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub eps: f64,
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect()
}

const ZERO_MASS_DUAL: f64 = -1e150;

/// `C / eps` in row-major and column-major layout, the matching Gibbs
/// kernels shifted by each line's minimum, and log weights. Duals are kept
/// scaled, `u = f / eps` and `v = g / eps`.
struct Scaled {
    n: usize,
    m: usize,
    rows: Vec<f64>,
    cols: Vec<f64>,
    krows: Vec<f64>,
    kcols: Vec<f64>,
    row_min: Vec<f64>,
    col_min: Vec<f64>,
    la: Vec<f64>,
    lb: Vec<f64>,
}

fn lse_shifted(duals: &[f64], line: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (d, c) in duals.iter().zip(line) {
        mx = mx.max(d - c);
    }
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    let s: f64 = duals.iter().zip(line).map(|(d, c)| (d - c - mx).exp()).sum();
    mx + s.ln()
}

/// Duals together with `exp(d - max d)`, reused across every line of a sweep.
struct Exped<'a> {
    d: &'a [f64],
    e: Vec<f64>,
    max: f64,
}

impl<'a> Exped<'a> {
    fn new(d: &'a [f64]) -> Self {
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = d.iter().map(|x| (x - max).exp()).collect();
        Exped { d, e, max }
    }
}

/// `LSE_k(d_k - line_k)`, where `kline = exp(-(line - lmin))`. The product
/// form avoids one `exp` per entry; if it underflows the plain log-domain
/// sum takes over. With `weights`, also writes the softmax weights.
fn lse_line(d: &Exped, line: &[f64], kline: &[f64], lmin: f64, weights: Option<&mut [f64]>) -> f64 {
    let s: f64 = d.e.iter().zip(kline).map(|(a, b)| a * b).sum();
    if s > 1e-280 && s.is_finite() && d.max.is_finite() {
        if let Some(w) = weights {
            let inv = 1.0 / s;
            for ((w, a), b) in w.iter_mut().zip(&d.e).zip(kline) {
                *w = a * b * inv;
            }
        }
        return d.max - lmin + s.ln();
    }
    let z = lse_shifted(d.d, line);
    if let Some(w) = weights {
        for ((w, dk), c) in w.iter_mut().zip(d.d).zip(line) {
            *w = (dk - c - z).exp();
        }
    }
    z
}

fn gibbs(lines: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut k = Vec::with_capacity(lines.len());
    let mut mins = Vec::new();
    for line in lines.chunks(len.max(1)) {
        let mn = line.iter().copied().fold(f64::INFINITY, f64::min);
        mins.push(mn);
        k.extend(line.iter().map(|c| (mn - c).exp()));
    }
    (k, mins)
}

impl Scaled {
    fn new(a: &[f64], b: &[f64], c: &[f64], m: usize, eps: f64) -> Self {
        let n = a.len();
        let rows: Vec<f64> = c.iter().map(|v| v / eps).collect();
        let mut cols = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                cols[j * n + i] = rows[i * m + j];
            }
        }
        let (krows, row_min) = gibbs(&rows, m);
        let (kcols, col_min) = gibbs(&cols, n);
        Scaled {
            n,
            m,
            rows,
            cols,
            krows,
            kcols,
            row_min,
            col_min,
            la: log_weights(a),
            lb: log_weights(b),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.m..(i + 1) * self.m]
    }

    /// `LSE_j(v_j - C_ij / eps)`, optionally with the weights over `j`.
    fn row_lse(&self, i: usize, v: &Exped, weights: Option<&mut [f64]>) -> f64 {
        let span = i * self.m..(i + 1) * self.m;
        lse_line(v, &self.rows[span.clone()], &self.krows[span], self.row_min[i], weights)
    }

    /// `LSE_i(u_i - C_ij / eps)`, optionally with the weights over `i`.
    fn col_lse(&self, j: usize, u: &Exped, weights: Option<&mut [f64]>) -> f64 {
        let span = j * self.n..(j + 1) * self.n;
        lse_line(u, &self.cols[span.clone()], &self.kcols[span], self.col_min[j], weights)
    }

    fn plan(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n * self.m);
        for (i, ui) in u.iter().enumerate() {
            p.extend(v.iter().zip(self.row(i)).map(|(vj, c)| (ui + vj - c).exp()));
        }
        p
    }

    /// Runs the f-then-g iteration. Every row log-sum is computed once and
    /// serves both the residual of the current plan and the next `f` update.
    /// `history` receives `(u, v)` after each iteration when given.
    fn run(
        &self,
        max_iter: usize,
        tol: f64,
        mut history: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n, self.m);
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; m];
        let mut residuals = Vec::new();
        let a: Vec<f64> = self.la.iter().map(|l| l.exp()).collect();
        let mut rl: Vec<f64> = {
            let ve = Exped::new(&v);
            (0..n).map(|i| self.row_lse(i, &ve, None)).collect()
        };
        for _ in 0..max_iter {
            for i in 0..n {
                // Zero mass: keep the dual finite, the plan row vanishes anyway.
                u[i] = if self.la[i] == f64::NEG_INFINITY { ZERO_MASS_DUAL } else { self.la[i] - rl[i] };
            }
            let ue = Exped::new(&u);
            for (j, vj) in v.iter_mut().enumerate() {
                let cl = self.col_lse(j, &ue, None);
                *vj = if self.lb[j] == f64::NEG_INFINITY { ZERO_MASS_DUAL } else { self.lb[j] - cl };
            }
            let ve = Exped::new(&v);
            for (i, r) in rl.iter_mut().enumerate() {
                *r = self.row_lse(i, &ve, None);
            }
            let r: f64 = (0..n).map(|i| ((u[i] + rl[i]).exp() - a[i]).abs()).sum();
            residuals.push(r);
            if let Some(h) = history.as_deref_mut() {
                h.push((u.clone(), v.clone()));
            }
            if r < tol {
                break;
            }
        }
        (u, v, residuals)
    }
}

fn check_dims(a: usize, b: usize, c: &Tensor) -> Result<()> {
    if c.dims() != (a, b) {
        return Err(Error::ShapeMismatch {
            op: "sinkhorn",
            lhs: vec![a, b],
            rhs: c.shape().to_vec(),
        });
    }
    Ok(())
}

/// Log-domain Sinkhorn. Failing to reach `tol` is not an error: the result
/// carries `converged = false` and the achieved residuals.
pub fn sinkhorn(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    let c = cost.values();
    let (n, m) = (a.len(), b.len());
    check_dims(n, m, c)?;
    let eps = cfg.eps_for(c)?;
    let s = Scaled::new(a.weights(), b.weights(), c.data(), m, eps);
    let (u, v, residuals) = s.run(cfg.max_iter, cfg.tol, None);
    let converged = residuals.last().is_some_and(|r| *r < cfg.tol);
    let p = s.plan(&u, &v);
    let distance: f64 = p.iter().zip(c.data()).map(|(pi, ci)| pi * ci).sum();
    if !distance.is_finite() {
        return Err(Error::NonFinite("sinkhorn"));
    }
    Ok(SinkhornResult {
        distance,
        plan: Tensor::matrix(n, m, p)?,
        f: u.iter().map(|x| x * eps).collect(),
        g: v.iter().map(|x| x * eps).collect(),
        iterations: residuals.len(),
        residuals,
        converged,
        eps,
    })
}

struct SinkhornBackward {
    eps: f64,
    /// Scaled duals `(u^l, v^l)` for l = 1..=L; `v^0 = 0`.
    history: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CustomBackward for SinkhornBackward {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (a, b, c) = (inputs[0], inputs[1], inputs[2]);
        let (n, m) = c.dims();
        let eps = self.eps;
        let s = Scaled::new(a.data(), b.data(), c.data(), m, eps);
        let up = grad_out.item();
        let levels = self.history.len();

        // d = sum P C with P = exp(u + v - C/eps). Adjoints below are wrt
        // the unscaled duals f = eps u and g = eps v.
        let (u_last, v_last) = &self.history[levels - 1];
        let p = s.plan(u_last, v_last);
        let cd = c.data();
        let mut c_bar: Vec<f64> = p
            .iter()
            .zip(cd)
            .map(|(pij, cij)| up * (pij - cij * pij / eps))
            .collect();
        let mut f_bar = vec![0.0; n];
        let mut g_bar = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let w = up * cd[i * m + j] * p[i * m + j] / eps;
                f_bar[i] += w;
                g_bar[j] += w;
            }
        }
        let mut la_bar = vec![0.0; n];
        let mut lb_bar = vec![0.0; m];
        let zero = vec![0.0; m];
        let (mut wn, mut wm) = (vec![0.0; n], vec![0.0; m]);
        // g-step contributions, column-major to keep the writes contiguous.
        let mut c_bar_cols = vec![0.0; n * m];
        for l in (0..levels).rev() {
            let u = &self.history[l].0;
            let v_prev = if l == 0 { &zero } else { &self.history[l - 1].1 };
            // g-step: g_j = eps lb_j - eps LSE_i(u_i - C_ij / eps)
            let ue = Exped::new(u);
            for j in 0..m {
                lb_bar[j] += eps * g_bar[j];
                if g_bar[j] == 0.0 {
                    continue;
                }
                s.col_lse(j, &ue, Some(&mut wn));
                let cb = &mut c_bar_cols[j * n..(j + 1) * n];
                for i in 0..n {
                    let w = wn[i] * g_bar[j];
                    f_bar[i] -= w;
                    cb[i] += w;
                }
            }
            // f-step: f_i = eps la_i - eps LSE_j(v_j - C_ij / eps)
            g_bar.iter_mut().for_each(|x| *x = 0.0);
            let ve = Exped::new(v_prev);
            for i in 0..n {
                la_bar[i] += eps * f_bar[i];
                if f_bar[i] == 0.0 {
                    continue;
                }
                s.row_lse(i, &ve, Some(&mut wm));
                let cb = &mut c_bar[i * m..(i + 1) * m];
                for j in 0..m {
                    let w = wm[j] * f_bar[i];
                    g_bar[j] -= w;
                    cb[j] += w;
                }
            }
            f_bar.iter_mut().for_each(|x| *x = 0.0);
        }
        for j in 0..m {
            for i in 0..n {
                c_bar[i * m + j] += c_bar_cols[j * n + i];
            }
        }
        let a_bar: Vec<f64> = la_bar.iter().zip(a.data()).map(|(g, w)| g / w).collect();
        let b_bar: Vec<f64> = lb_bar.iter().zip(b.data()).map(|(g, w)| g / w).collect();
        Ok(vec![
            Tensor::matrix(n, 1, a_bar)?,
            Tensor::matrix(m, 1, b_bar)?,
            Tensor::matrix(n, m, c_bar)?,
        ])
    }
}

/// Entropic transport cost `sum_ij P_ij C_ij` as a differentiable tape node.
///
/// `a` is `n x 1`, `b` is `m x 1`, both with strictly positive entries
/// summing to one (loosely checked, so finite-difference probes pass), and
/// `cost` is `n x m`. The regularization is computed
/// from the cost value and held constant.
pub fn sinkhorn_op(tape: &mut Tape, a: Var, b: Var, cost: Var, cfg: &SinkhornConfig) -> Result<Var> {
    let (ta, tb, tc) = (tape.value(a), tape.value(b), tape.value(cost));
    let (n, m) = tc.dims();
    if ta.dims() != (n, 1) || tb.dims() != (m, 1) {
        return Err(Error::ShapeMismatch {
            op: "sinkhorn_op",
            lhs: vec![ta.rows(), tb.rows()],
            rhs: vec![n, m],
        });
    }
    if ta.data().iter().chain(tb.data()).any(|w| !(*w > 0.0)) {
        return Err(invalid("sinkhorn_op needs strictly positive weights"));
    }
    for (w, name) in [(ta, "a"), (tb, "b")] {
        let s = w.sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(invalid(format!("marginal {name} sums to {s}, expected 1")));
        }
    }
    let eps = cfg.eps_for(tc)?;
    let s = Scaled::new(ta.data(), tb.data(), tc.data(), m, eps);
    let mut history = Vec::new();
    s.run(cfg.max_iter, cfg.tol, Some(&mut history));
    let (u, v) = history.last().expect("max_iter is at least 1");
    let p = s.plan(u, v);
    let d: f64 = p.iter().zip(tc.data()).map(|(pi, ci)| pi * ci).sum();
    if !d.is_finite() {
        return Err(Error::NonFinite("sinkhorn_op"));
    }
    tape.custom(
        &[a, b, cost],
        Tensor::scalar(d),
        Box::new(SinkhornBackward { eps, history }),
    )
}

/// Largest support size accepted by [`exact_ot_small`].
pub const EXACT_OT_LIMIT: usize = 8;

/// Exact optimal transport cost for small instances.
///
/// Equal-size uniform measures are solved by enumerating assignments.
/// Other weights go through a dense two-phase simplex with Bland's rule on
/// the transportation polytope.
pub fn exact_ot_small(a: &DiscreteMeasure, b: &DiscreteMeasure, cost: &CostMatrix) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    check_dims(n, m, cost.values())?;
    if n > EXACT_OT_LIMIT || m > EXACT_OT_LIMIT {
        return Err(Error::TooLarge {
            rows: n,
            cols: m,
            limit: EXACT_OT_LIMIT,
        });
    }
    let c = cost.values();
    let uniform = |w: &[f64]| w.iter().all(|x| (x - w[0]).abs() < 1e-15);
    if n == m && uniform(a.weights()) && uniform(b.weights()) {
        return Ok(best_assignment(c) / n as f64);
    }
    // Row sums for every i, column sums for all but the last j (redundant).
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        let mut r = vec![0.0; n * m];
        r[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 1.0);
        rows.push(r);
        rhs.push(a.weights()[i]);
    }
    for j in 0..m - 1 {
        let mut r = vec![0.0; n * m];
        for i in 0..n {
            r[i * m + j] = 1.0;
        }
        rows.push(r);
        rhs.push(b.weights()[j]);
    }
    simplex_min(rows, rhs, c.data().to_vec())
}

fn best_assignment(c: &Tensor) -> f64 {
    let n = c.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm.
    let mut stack = vec![0usize; n];
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>();
    best = best.min(eval(&perm));
    let mut i = 0;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(eval(&perm));
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    best
}

const PIVOT_TOL: f64 = 1e-12;

/// `min c^T x` subject to `A x = b`, `x >= 0`, with `b >= 0`.
fn simplex_min(a: Vec<Vec<f64>>, b: Vec<f64>, c: Vec<f64>) -> Result<f64> {
    let rows = a.len();
    let nv = c.len();
    let total = nv + rows;
    let mut t: Vec<Vec<f64>> = a
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            r.resize(total + 1, 0.0);
            r[nv + i] = 1.0;
            r[total] = b[i].max(0.0);
            r
        })
        .collect();
    let mut basis: Vec<usize> = (nv..total).collect();

    let mut phase1 = vec![0.0; total];
    phase1[nv..].iter_mut().for_each(|v| *v = 1.0);
    run_simplex(&mut t, &mut basis, &phase1, total)?;
    let infeas: f64 = (0..t.len()).map(|i| phase1[basis[i]] * t[i][total]).sum();
    if infeas > 1e-9 {
        return Err(invalid("transport problem is infeasible"));
    }
    // Move any artificial left at level zero out of the basis.
    let mut i = 0;
    while i < t.len() {
        if basis[i] >= nv {
            match (0..nv).find(|&j| t[i][j].abs() > 1e-9) {
                Some(j) => {
                    pivot(&mut t, &mut basis, i, j);
                    i += 1;
                }
                None => {
                    t.remove(i);
                    basis.remove(i);
                }
            }
        } else {
            i += 1;
        }
    }
    let mut phase2 = c;
    phase2.resize(total, 0.0);
    run_simplex(&mut t, &mut basis, &phase2, nv)?;
    Ok((0..t.len()).map(|i| phase2[basis[i]] * t[i][total]).sum())
}

fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) -> Result<()> {
    let last = t[0].len() - 1;
    for _ in 0..100_000 {
        let entering = (0..allowed).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let r = cost[j] - (0..t.len()).map(|i| cost[basis[i]] * t[i][j]).sum::<f64>();
            r < -PIVOT_TOL
        });
        let Some(j) = entering else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..t.len() {
            if t[i][j] > PIVOT_TOL {
                let ratio = t[i][last] / t[i][j];
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((k, best)) => {
                        if ratio < best - PIVOT_TOL
                            || ((ratio - best).abs() <= PIVOT_TOL && basis[i] < basis[k])
                        {
                            Some((i, ratio))
                        } else {
                            Some((k, best))
                        }
                    }
                };
            }
        }
        let Some((i, _)) = leave else {
            return Err(invalid("transport problem is unbounded"));
        };
        pivot(t, basis, i, j);
    }
    Err(invalid("simplex did not terminate"))
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize) {
    let p = t[row][col];
    t[row].iter_mut().for_each(|v| *v /= p);
    let pr = t[row].clone();
    for (i, r) in t.iter_mut().enumerate() {
        if i != row && r[col] != 0.0 {
            let f = r[col];
            r.iter_mut().zip(&pr).for_each(|(v, pv)| *v -= f * pv);
        }
    }
    basis[row] = col;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        assert_eq!(cost_matrix(&pts(&[0.0]), &pts(&[3.0])).unwrap().values().data(), &[9.0]);
        let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(cost_matrix(&x, &y).unwrap().values().data(), &[1.0, 2.0]);
        let c = cost_matrix(&x, &x).unwrap();
        assert_eq!((c.values().get(0, 0), c.values().get(1, 1)), (0.0, 0.0));
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(vec![-0.5, 1.5]).is_err());
        assert!(DiscreteMeasure::new(vec![]).is_err());
        assert!(DiscreteMeasure::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn exact_small_examples() {
        let u = DiscreteMeasure::uniform(2).unwrap();
        let c = cost_matrix(&pts(&[0.0, 1.0]), &pts(&[0.0, 1.0])).unwrap();
        assert_eq!(exact_ot_small(&u, &u, &c).unwrap(), 0.0);
        let c = cost_matrix(&pts(&[0.0, 2.0]), &pts(&[1.0, 3.0])).unwrap();
        assert!((exact_ot_small(&u, &u, &c).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn simplex_matches_assignment() {
        let a = DiscreteMeasure::uniform(3).unwrap();
        let c = cost_matrix(&pts(&[0.0, 1.0, 5.0]), &pts(&[0.5, 4.0, -1.0])).unwrap();
        let by_perm = exact_ot_small(&a, &a, &c).unwrap();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..9).map(|k| if k / 3 == i { 1.0 } else { 0.0 }).collect())
            .chain((0..2).map(|j| (0..9).map(|k| if k % 3 == j { 1.0 } else { 0.0 }).collect()))
            .collect();
        let lp = simplex_min(rows, vec![1.0 / 3.0; 5], c.values().data().to_vec()).unwrap();
        assert!((by_perm - lp).abs() < 1e-12, "{by_perm} vs {lp}");
    }

    #[test]
    fn unequal_weights() {
        // All mass of a at 0 must split to 1 and 2.
        let a = DiscreteMeasure::new(vec![1.0]).unwrap();
        let b = DiscreteMeasure::new(vec![0.25, 0.75]).unwrap();
        let c = cost_matrix(&pts(&[0.0]), &pts(&[1.0, 2.0])).unwrap();
        assert!((exact_ot_small(&a, &b, &c).unwrap() - (0.25 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn too_large_rejected() {
        let a = DiscreteMeasure::uniform(9).unwrap();
        let x = pts(&[0.0; 9]);
        let c = cost_matrix(&x, &x).unwrap();
        assert!(matches!(exact_ot_small(&a, &a, &c), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn dirac_pair() {
        let a = DiscreteMeasure::new(vec![1.0]).unwrap();
        let c = cost_matrix(&pts(&[0.0]), &pts(&[1.5])).unwrap();
        let r = sinkhorn(&a, &a, &c, &SinkhornConfig::absolute(1e-3, 10, 1e-12)).unwrap();
        assert!((r.distance - 2.25).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn op_gradient_matches_finite_differences() {
        let x = Tensor::matrix(3, 1, vec![0.0, 0.7, 1.5]).unwrap();
        let y = Tensor::matrix(4, 1, vec![0.2, -0.4, 1.0, 2.0]).unwrap();
        let c = cost_matrix(&x, &y).unwrap().values().clone();
        let a = Tensor::matrix(3, 1, vec![0.2, 0.5, 0.3]).unwrap();
        let b = Tensor::matrix(4, 1, vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let cfg = SinkhornConfig::absolute(0.3, 15, 0.0);
        let r = crate::autodiff::gradcheck(|t, v| sinkhorn_op(t, v[0], v[1], v[2], &cfg), &[a, b, c], 1e-6)
            .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }
}
