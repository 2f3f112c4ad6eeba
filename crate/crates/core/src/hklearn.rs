//! Heat-kernel learning by a JKO-style discretization of the Wasserstein
//! gradient flow of negative entropy.
//!
//! Each outer step fixes the measure `nu` from the current kernel and then
//! minimizes
//!
//! `alpha H(mu) + beta W2^2(nu, mu) - lambda mean_{i != j} k(x_j, x_i)`
//!
//! over the kernel parameters, where `mu` is the kernel density estimate of
//! the batch. The time step of the flow is `tau = alpha / (2 beta)`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::Kernel;
use crate::transport::{cost_matrix, sinkhorn_op, DiscreteMeasure, SinkhornConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyEstimator {
    /// `sum_i mu_i log mu_i`.
    PluginA,
    /// `(1/n) sum_j sum_i mu_i log k(x_j, x_i)`.
    PluginB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureMode {
    /// `mu_i = sum_j k(x_j, x_i) / sum_ij k(x_j, x_i)`, `nu_0 = mu^0`.
    Normalized,
    /// `nu_0 = 1/n` and `mu_i = sum_j k(x_j, x_i) / (n sum_j k^0(x_j, x_i))`
    /// against the kernel at the start of training.
    UniformInit,
    /// `mu_i = sum_j k(x_j, x_i) / n`, `nu_0 = mu^0`.
    Unnormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HkConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub outer_steps: usize,
    pub inner_opt_steps: usize,
    /// Points per outer step. `None` uses the whole sample.
    pub batch_size: Option<usize>,
    pub entropy_estimator: EntropyEstimator,
    pub measure_mode: MeasureMode,
    pub adam: AdamConfig,
    pub sinkhorn: SinkhornConfig,
    /// Reject Adam steps that increase the objective and retry with half
    /// the learning rate.
    pub monotone_inner: bool,
    pub max_step_halvings: usize,
}

impl Default for HkConfig {
    fn default() -> Self {
        HkConfig {
            alpha: 1.0,
            beta: 5.0,
            lambda: 0.1,
            outer_steps: 10,
            inner_opt_steps: 5,
            batch_size: None,
            entropy_estimator: EntropyEstimator::PluginA,
            measure_mode: MeasureMode::Normalized,
            adam: AdamConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            monotone_inner: true,
            max_step_halvings: 8,
        }
    }
}

impl HkConfig {
    /// Time step `alpha / (2 beta)`, undefined without a Wasserstein term.
    pub fn tau(&self) -> Option<f64> {
        (self.beta > 0.0).then(|| self.alpha / (2.0 * self.beta))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.beta > 0.0 {
            self.sinkhorn.eps_for(&Tensor::scalar(1.0))?;
        }
        Ok(())
    }
}

/// The previous-step measure over a fixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureSnapshot {
    pub weights: Vec<f64>,
    pub points: Tensor,
}

impl MeasureSnapshot {
    pub fn new(measure: DiscreteMeasure, points: Tensor) -> Result<Self> {
        if measure.len() != points.rows() {
            return Err(invalid(format!(
                "{} weights for {} points",
                measure.len(),
                points.rows()
            )));
        }
        Ok(MeasureSnapshot {
            weights: measure.weights().to_vec(),
            points,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    /// Objective at the start of the step, with the step's `nu`.
    pub objective_start: f64,
    pub objective: f64,
    pub entropy: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with columns `step,objective,entropy,wasserstein,penalty`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,objective,entropy,wasserstein,penalty\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                e.step, e.objective, e.entropy, e.wasserstein, e.penalty
            ));
        }
        s
    }
}

/// Objective components on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub entropy: Var,
    pub wasserstein: Var,
    pub penalty: Var,
    pub measure: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub entropy: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub weights: Vec<f64>,
}

/// Normalized kernel density weights from a Gram matrix with entry
/// `(j, i) = k(x_j, x_i)`, as an `n x 1` column.
pub fn kde_weights(tape: &mut Tape, gram: Var) -> Result<Var> {
    let cols = tape.sum_rows(gram)?;
    let cols = tape.transpose(cols)?;
    let total = tape.sum(cols)?;
    if tape.value(total).item() == 0.0 {
        return Err(Error::ZeroDenominator("normalized_kde"));
    }
    tape.div(cols, total)
}

fn measure_from_gram(
    tape: &mut Tape,
    gram: Var,
    mode: MeasureMode,
    reference: Option<&[f64]>,
) -> Result<Var> {
    let n = tape.value(gram).rows();
    match mode {
        MeasureMode::Normalized => kde_weights(tape, gram),
        MeasureMode::Unnormalized => {
            let cols = tape.sum_rows(gram)?;
            let cols = tape.transpose(cols)?;
            tape.scale(cols, 1.0 / n as f64)
        }
        MeasureMode::UniformInit => {
            let r = reference.ok_or_else(|| invalid("ratio measure needs the initial kernel"))?;
            if r.len() != n {
                return Err(invalid("reference sums do not match the batch"));
            }
            if r.contains(&0.0) {
                return Err(Error::ZeroDenominator("unnormalized_ratio_measure"));
            }
            let cols = tape.sum_rows(gram)?;
            let cols = tape.transpose(cols)?;
            let denom = tape.leaf(Tensor::column(&r.iter().map(|v| v * n as f64).collect::<Vec<_>>()))?;
            tape.div(cols, denom)
        }
    }
}

/// Negative entropy of `measure` (`n x 1`) on the tape.
pub fn neg_entropy_op(
    tape: &mut Tape,
    measure: Var,
    gram: Var,
    estimator: EntropyEstimator,
) -> Result<Var> {
    match estimator {
        EntropyEstimator::PluginA => {
            if tape.value(measure).data().iter().any(|w| *w <= 0.0) {
                return Err(invalid("entropy estimator A needs strictly positive weights"));
            }
            let l = tape.ln(measure)?;
            let t = tape.mul(measure, l)?;
            tape.sum(t)
        }
        EntropyEstimator::PluginB => {
            let n = tape.value(gram).rows();
            if tape.value(gram).data().iter().any(|k| *k <= 0.0) {
                return Err(invalid("entropy estimator B needs positive kernel values"));
            }
            let lk = tape.ln(gram)?;
            let cols = tape.sum_rows(lk)?;
            let cols = tape.transpose(cols)?;
            let t = tape.mul(measure, cols)?;
            let s = tape.sum(t)?;
            tape.scale(s, 1.0 / n as f64)
        }
    }
}

/// Mean of `k(x_j, x_i)` over ordered pairs `i != j`; zero for one point.
pub fn off_diagonal_mean(tape: &mut Tape, gram: Var) -> Result<Var> {
    let n = tape.value(gram).rows();
    if n < 2 {
        return tape.scalar(0.0);
    }
    let mask = tape.leaf(Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }))?;
    let off = tape.mul(gram, mask)?;
    let s = tape.sum(off)?;
    tape.scale(s, 1.0 / (n * (n - 1)) as f64)
}

fn to_unit_mass(tape: &mut Tape, w: Var) -> Result<Var> {
    let s = tape.sum(w)?;
    if tape.value(s).item() <= 0.0 {
        return Err(Error::ZeroDenominator("measure mass"));
    }
    tape.div(w, s)
}

/// Builds the full objective for a batch `x` already on the tape.
/// `reference` holds `sum_j k^0(x_j, x_i)` for the ratio measure.
#[allow(clippy::too_many_arguments)]
pub fn hk_objective_op<K: Kernel + ?Sized>(
    tape: &mut Tape,
    kernel: &K,
    p: &[Var],
    x: Var,
    nu: &[f64],
    cost: &Tensor,
    reference: Option<&[f64]>,
    cfg: &HkConfig,
) -> Result<ObjectiveVars> {
    let n = tape.value(x).rows();
    if nu.len() != n {
        return Err(invalid(format!("nu has {} weights for {n} points", nu.len())));
    }
    let gram = kernel.gram(tape, p, x, x)?;
    let measure = measure_from_gram(tape, gram, cfg.measure_mode, reference)?;
    let entropy = neg_entropy_op(tape, measure, gram, cfg.entropy_estimator)?;
    let wasserstein = if cfg.beta > 0.0 && n > 1 {
        let mu = match cfg.measure_mode {
            MeasureMode::Normalized => measure,
            _ => to_unit_mass(tape, measure)?,
        };
        let s: f64 = nu.iter().sum();
        let nu_v = tape.leaf(Tensor::column(&nu.iter().map(|v| v / s).collect::<Vec<_>>()))?;
        let c = tape.leaf(cost.clone())?;
        sinkhorn_op(tape, nu_v, mu, c, &cfg.sinkhorn)?
    } else {
        tape.scalar(0.0)?
    };
    let penalty = off_diagonal_mean(tape, gram)?;
    let a = tape.scale(entropy, cfg.alpha)?;
    let b = tape.scale(wasserstein, cfg.beta)?;
    let l = tape.scale(penalty, cfg.lambda)?;
    let total = tape.add(a, b)?;
    let total = tape.sub(total, l)?;
    Ok(ObjectiveVars {
        total,
        entropy,
        wasserstein,
        penalty,
        measure,
    })
}

fn read(tape: &Tape, v: &ObjectiveVars) -> ObjectiveValue {
    ObjectiveValue {
        total: tape.value(v.total).item(),
        entropy: tape.value(v.entropy).item(),
        wasserstein: tape.value(v.wasserstein).item(),
        penalty: tape.value(v.penalty).item(),
        weights: tape.value(v.measure).data().to_vec(),
    }
}

fn evaluate<K: Kernel + ?Sized>(
    kernel: &K,
    x: &Tensor,
    nu: &[f64],
    cost: &Tensor,
    reference: Option<&[f64]>,
    cfg: &HkConfig,
) -> Result<ObjectiveValue> {
    let mut tape = Tape::new();
    let p = kernel.store().bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let o = hk_objective_op(&mut tape, kernel, &p, xv, nu, cost, reference, cfg)?;
    Ok(read(&tape, &o))
}

/// Current measure of `x` under `kernel` for the configured mode.
fn current_measure<K: Kernel + ?Sized>(
    kernel: &K,
    x: &Tensor,
    mode: MeasureMode,
    reference: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = kernel.store().bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let g = kernel.gram(&mut tape, &p, xv, xv)?;
    let m = measure_from_gram(&mut tape, g, mode, reference)?;
    Ok(tape.value(m).data().to_vec())
}

fn column_sums<K: Kernel + ?Sized>(kernel: &K, x: &Tensor) -> Result<Vec<f64>> {
    let g = crate::kernels::gram(kernel, x, x, false)?.values;
    let n = g.rows();
    Ok((0..n).map(|i| (0..n).map(|j| g.get(j, i)).sum()).collect())
}

/// `mu_i = sum_j k(x_j, x_i) / sum_ij k(x_j, x_i)`.
pub fn normalized_kde<K: Kernel + ?Sized>(kernel: &K, x: &Tensor) -> Result<DiscreteMeasure> {
    if x.rows() == 0 {
        return Err(Error::Empty("normalized_kde"));
    }
    let w = current_measure(kernel, x, MeasureMode::Normalized, None)?;
    // Renormalize to absorb rounding in the division.
    DiscreteMeasure::normalized(&w)
}

pub fn uniform_measure(n: usize) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(n)
}

/// `mu_i = sum_j k_t(x_j, x_i) / (n sum_j k_0(x_j, x_i))`, not normalized.
pub fn unnormalized_ratio_measure<K0: Kernel + ?Sized, K1: Kernel + ?Sized>(
    kernel_t: &K1,
    kernel_0: &K0,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let r = column_sums(kernel_0, x)?;
    current_measure(kernel_t, x, MeasureMode::UniformInit, Some(&r))
}

/// Negative entropy of `weights` over the batch `x`.
pub fn neg_entropy<K: Kernel + ?Sized>(
    weights: &[f64],
    kernel: &K,
    x: &Tensor,
    estimator: EntropyEstimator,
) -> Result<f64> {
    if weights.len() != x.rows() {
        return Err(invalid("one weight per point is required"));
    }
    let mut tape = Tape::new();
    let p = kernel.store().bind(&mut tape)?;
    let xv = tape.leaf(x.clone())?;
    let g = match estimator {
        EntropyEstimator::PluginA => xv,
        EntropyEstimator::PluginB => kernel.gram(&mut tape, &p, xv, xv)?,
    };
    let m = tape.leaf(Tensor::column(weights))?;
    let h = neg_entropy_op(&mut tape, m, g, estimator)?;
    Ok(tape.value(h).item())
}

/// Objective value with `nu` fixed over its own batch.
pub fn hk_objective<K: Kernel + ?Sized>(
    kernel: &K,
    nu: &MeasureSnapshot,
    cfg: &HkConfig,
) -> Result<ObjectiveValue> {
    let cost = cost_matrix(&nu.points, &nu.points)?;
    evaluate(kernel, &nu.points, &nu.weights, cost.values(), None, cfg)
}

/// Stateful runner of the outer loop. On error the trajectory recorded so
/// far stays available.
#[derive(Clone, Debug)]
pub struct HeatKernelLearner<K: Kernel + Clone> {
    pub kernel: K,
    pub config: HkConfig,
    pub trajectory: Trajectory,
    initial: ParamStore,
    adam: AdamState,
    steps: usize,
}

impl<K: Kernel + Clone> HeatKernelLearner<K> {
    pub fn new(kernel: K, config: HkConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(kernel.store(), config.adam);
        Ok(HeatKernelLearner {
            initial: kernel.store().clone(),
            kernel,
            config,
            trajectory: Trajectory::default(),
            adam,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn initial_kernel(&self) -> Result<K> {
        let mut k0 = self.kernel.clone();
        k0.store_mut().copy_from(&self.initial)?;
        Ok(k0)
    }

    /// One outer step on `x`: snapshot `nu`, then run the inner optimizer.
    pub fn step(&mut self, x: &Tensor, rng: &mut impl Rng) -> Result<&TrajectoryEntry> {
        let cfg = self.config.clone();
        let x = match cfg.batch_size {
            Some(b) if b < x.rows() => {
                let mut idx = sample(rng, x.rows(), b).into_vec();
                idx.sort_unstable();
                x.select_rows(&idx)?
            }
            _ => x.clone(),
        };
        let n = x.rows();
        if n == 0 {
            return Err(Error::Empty("heat_kernel_learning"));
        }
        self.kernel.resample(rng);
        let reference = match cfg.measure_mode {
            MeasureMode::UniformInit => Some(column_sums(&self.initial_kernel()?, &x)?),
            _ => None,
        };
        let reference = reference.as_deref();
        let nu = if self.steps == 0 && cfg.measure_mode == MeasureMode::UniformInit {
            vec![1.0 / n as f64; n]
        } else {
            current_measure(&self.kernel, &x, cfg.measure_mode, reference)?
        };
        let cost = cost_matrix(&x, &x)?;
        let cost = cost.values();
        let step = self.steps + 1;

        // The first forward pass doubles as the start value, accepted trials
        // as the end value.
        let mut start: Option<ObjectiveValue> = None;
        let mut current: Option<ObjectiveValue> = None;
        for _ in 0..cfg.inner_opt_steps {
            let mut tape = Tape::new();
            let p = self.kernel.store().bind(&mut tape)?;
            let xv = tape.leaf(x.clone())?;
            let o = hk_objective_op(&mut tape, &self.kernel, &p, xv, &nu, cost, reference, &cfg)?;
            let here = read(&tape, &o);
            if start.is_none() {
                start = Some(here.clone());
            }
            let grads = tape.backward(o.total)?;
            let g = self.kernel.store().collect_grads(&tape, &grads, &p);
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            if !cfg.monotone_inner {
                self.adam.step(self.kernel.store_mut(), &g)?;
                current = None;
                continue;
            }
            let best = current.get_or_insert(here).total;
            let saved_store = self.kernel.store().clone();
            let saved_adam = self.adam.clone();
            let mut accepted = false;
            for halving in 0..=cfg.max_step_halvings {
                self.adam.config.lr = cfg.adam.lr * 0.5f64.powi(halving as i32);
                self.adam.step(self.kernel.store_mut(), &g)?;
                let trial = evaluate(&self.kernel, &x, &nu, cost, reference, &cfg);
                match trial {
                    Ok(t) if t.total <= best => {
                        current = Some(t);
                        accepted = true;
                    }
                    _ => {
                        self.kernel.store_mut().copy_from(&saved_store)?;
                        self.adam = saved_adam.clone();
                    }
                }
                if accepted {
                    break;
                }
            }
            self.adam.config.lr = cfg.adam.lr;
            if !accepted {
                break;
            }
        }
        let start = match start {
            Some(v) => v,
            None => evaluate(&self.kernel, &x, &nu, cost, reference, &cfg)?,
        };
        let end = match current {
            Some(v) => v,
            None => evaluate(&self.kernel, &x, &nu, cost, reference, &cfg)?,
        };
        if ![end.total, end.entropy, end.wasserstein, end.penalty].iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite objective".into(),
            });
        }
        self.steps = step;
        self.trajectory.entries.push(TrajectoryEntry {
            step,
            objective_start: start.total,
            objective: end.total,
            entropy: end.entropy,
            wasserstein: end.wasserstein,
            penalty: end.penalty,
            weights: end.weights,
        });
        Ok(self.trajectory.entries.last().unwrap())
    }

    /// Runs `config.outer_steps` outer steps.
    pub fn run(&mut self, x: &Tensor, rng: &mut impl Rng) -> Result<()> {
        if x.rows() < 2 {
            return Err(invalid("heat kernel learning needs at least two points"));
        }
        for _ in 0..self.config.outer_steps {
            self.step(x, rng)?;
        }
        Ok(())
    }
}

/// Runs the full outer loop and returns the trained kernel with its
/// trajectory. Use [`HeatKernelLearner`] to keep the partial trajectory of
/// a failed run.
pub fn heat_kernel_learning<K: Kernel + Clone>(
    x: &Tensor,
    kernel: K,
    cfg: &HkConfig,
    rng: &mut impl Rng,
) -> Result<(K, Trajectory)> {
    let mut learner = HeatKernelLearner::new(kernel, cfg.clone())?;
    learner.run(x, rng)?;
    Ok((learner.kernel, learner.trajectory))
}
