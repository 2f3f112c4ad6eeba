//! Finite-difference references for reverse-mode gradients and for the
//! mixed second derivative used by the scaled MMD.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// `max |analytic - numeric| / max(|numeric|_inf, floor)` over all inputs.
    pub max_rel_error: f64,
}

/// Central-difference gradient of `f` with respect to every entry of every
/// input.
pub fn finite_difference_grad(
    f: impl Fn(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    step: f64,
) -> Result<Vec<Tensor>> {
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let (r, c) = inputs[k].dims();
        let mut g = Tensor::zeros(r, c);
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + step;
            let plus = f(&probe)?;
            probe[k].data_mut()[e] = orig - step;
            let minus = f(&probe)?;
            probe[k].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Runs `build` once under reverse mode and repeatedly under central
/// differences, and reports the worst relative disagreement.
pub fn gradcheck(
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f64,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt_or_zero(&tape, v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect::<Result<_>>()?;
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let numeric = finite_difference_grad(eval, inputs, step)?;

    let scale = numeric.iter().map(|g| g.max_abs()).fold(1e-8_f64, f64::max);
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error: worst,
    })
}

/// `sum_i d^2 k(y, z) / dy_i dz_i` at `y = z = x` by central differences.
pub fn hessian_trace_cross(
    kernel: impl Fn(&[f64], &[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("hessian_trace_cross"));
    }
    let mut total = 0.0;
    let mut yp = x.to_vec();
    let mut ym = x.to_vec();
    for i in 0..x.len() {
        yp[i] = x[i] + step;
        ym[i] = x[i] - step;
        let pp = kernel(&yp, &yp)?;
        let pm = kernel(&yp, &ym)?;
        let mp = kernel(&ym, &yp)?;
        let mm = kernel(&ym, &ym)?;
        total += (pp - pm - mp + mm) / (4.0 * step * step);
        yp[i] = x[i];
        ym[i] = x[i];
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("hessian_trace_cross"));
    }
    Ok(total)
}
