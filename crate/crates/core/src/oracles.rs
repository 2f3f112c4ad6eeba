//! Closed-form heat kernels and checks derived from heat-kernel theory.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};

fn check_t(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(invalid(format!("time must be positive, got {t}")));
    }
    Ok(())
}

/// `exp(-(x - x0)^2 / 4t) / sqrt(4 pi t)`.
pub fn heat_kernel_line(t: f64, x0: f64, x: f64) -> Result<f64> {
    check_t(t)?;
    let d = x - x0;
    Ok((-d * d / (4.0 * t)).exp() / (4.0 * PI * t).sqrt())
}

/// Peak value `1 / sqrt(4 pi t)` of the line kernel.
pub fn a_t_line(t: f64) -> Result<f64> {
    check_t(t)?;
    Ok(1.0 / (4.0 * PI * t).sqrt())
}

/// Smallest image count whose dropped tail is below `1e-12`.
pub fn circle_terms_for(t: f64, radius: f64) -> Result<usize> {
    check_t(t)?;
    if !(radius.is_finite() && radius > 0.0) {
        return Err(invalid("radius must be positive"));
    }
    let period = 2.0 * PI * radius;
    let norm = 1.0 / (4.0 * PI * t).sqrt();
    // Worst case |arc| = period / 2, so image m sits at least (m - 1/2) periods away.
    let bound = |m: usize| {
        let d = (m as f64 - 0.5) * period;
        norm * (-d * d / (4.0 * t)).exp()
    };
    let mut n = 1;
    loop {
        let mut tail = 0.0;
        let mut m = n + 1;
        loop {
            let b = bound(m);
            tail += 2.0 * b;
            if b < 1e-300 || m > n + 100_000 {
                break;
            }
            m += 1;
        }
        if tail < 1e-12 {
            return Ok(n);
        }
        n += 1;
    }
}

/// Wrapped Gaussian on a circle of the given radius, in angles.
pub fn heat_kernel_circle(t: f64, theta0: f64, theta: f64, radius: f64, n_terms: usize) -> Result<f64> {
    check_t(t)?;
    if n_terms == 0 {
        return Err(invalid("n_terms must be at least 1"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(invalid("radius must be positive"));
    }
    let dtheta = (theta - theta0).rem_euclid(2.0 * PI);
    let dtheta = if dtheta > PI { dtheta - 2.0 * PI } else { dtheta };
    let arc = radius * dtheta;
    let period = 2.0 * PI * radius;
    let m = n_terms as i64;
    let mut s = 0.0;
    for k in -m..=m {
        s += heat_kernel_line(t, 0.0, arc + period * k as f64)?;
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum AnalyticKernel {
    Line1d,
    Circle { radius: f64 },
}

impl AnalyticKernel {
    /// Evaluates in arc-length coordinates.
    pub fn eval(&self, t: f64, x0: f64, x: f64) -> Result<f64> {
        match *self {
            AnalyticKernel::Line1d => heat_kernel_line(t, x0, x),
            AnalyticKernel::Circle { radius } => {
                let n = circle_terms_for(t, radius)?;
                heat_kernel_circle(t, x0 / radius, x / radius, radius, n)
            }
        }
    }

    /// `int k(t, x0, x)^2 dx` by trapezoid quadrature.
    pub fn squared_norm(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        let (lo, hi, steps) = match *self {
            AnalyticKernel::Line1d => {
                let half = 40.0 * t.sqrt();
                (-half, half, 8000)
            }
            AnalyticKernel::Circle { radius } => (-PI * radius, PI * radius, 8000),
        };
        let h = (hi - lo) / steps as f64;
        let grid: Vec<f64> = (0..=steps).map(|i| lo + h * i as f64).collect();
        let vals: Vec<f64> = match *self {
            AnalyticKernel::Line1d => grid.iter().map(|&x| heat_kernel_line(t, 0.0, x)).collect::<Result<_>>()?,
            AnalyticKernel::Circle { radius } => {
                let n = circle_terms_for(t, radius)?;
                grid.iter()
                    .map(|&x| heat_kernel_circle(t, 0.0, x / radius, radius, n))
                    .collect::<Result<_>>()?
            }
        };
        let zeros = vec![0.0; vals.len()];
        l2_kernel_distance(&vals, &zeros, &grid)
    }
}

/// `Gamma(d/2 + 1) / (C (pi t)^(d/2)) * exp(pi^2 (1 - d) / ((4 - eps) K t))`.
pub fn lower_bound_thm4(t: f64, dim: usize, curvature: f64, eps: f64, c_eps: f64) -> Result<f64> {
    check_t(t)?;
    if dim == 0 {
        return Err(invalid("dim must be at least 1"));
    }
    if !(curvature.is_finite() && curvature > 0.0) {
        return Err(invalid("curvature bound must be positive"));
    }
    if !(eps > 0.0 && eps < 4.0) {
        return Err(invalid("eps must lie in (0, 4)"));
    }
    if !(c_eps.is_finite() && c_eps > 0.0) {
        return Err(invalid("C(eps) must be positive"));
    }
    let d = dim as f64;
    let exponent = PI * PI * (1.0 - d) / ((4.0 - eps) * curvature * t);
    Ok(gamma(d / 2.0 + 1.0) / (c_eps * (PI * t).powf(d / 2.0)) * exponent.exp())
}

/// Time after which the lower bound decreases. For `dim >= 2` the bound
/// rises on `(0, t*)` and falls afterwards; for `dim = 1` it falls
/// everywhere and `t* = 0`.
pub fn thm4_turning_point(dim: usize, curvature: f64, eps: f64) -> f64 {
    let d = dim as f64;
    2.0 * PI * PI * (d - 1.0) / (d * (4.0 - eps) * curvature)
}

/// `|-4 t log k(t, x0, x) - d(x0, x)^2|`.
pub fn varadhan_residual(
    kernel: impl Fn(f64, f64, f64) -> Result<f64>,
    geodesic: impl Fn(f64, f64) -> f64,
    t: f64,
    x0: f64,
    x: f64,
) -> Result<f64> {
    check_t(t)?;
    let k = kernel(t, x0, x)?;
    if !(k > 0.0) {
        return Err(invalid(format!("kernel value {k} is not positive")));
    }
    let d = geodesic(x0, x);
    Ok((-4.0 * t * k.ln() - d * d).abs())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(invalid("grid needs at least two points"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("grid must be strictly increasing"));
    }
    Ok(())
}

/// Trapezoid approximation of `int (f - g)^2 dx` over sampled values.
pub fn l2_kernel_distance(f: &[f64], g: &[f64], grid: &[f64]) -> Result<f64> {
    check_grid(grid)?;
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "l2_kernel_distance",
            lhs: vec![f.len(), g.len()],
            rhs: vec![grid.len()],
        });
    }
    let sq: Vec<f64> = f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(grid
        .windows(2)
        .zip(sq.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum())
}

/// Evenly spaced grid from `lo` to `hi` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(hi > lo && step > 0.0) {
        return Err(invalid("grid needs lo < hi and a positive step"));
    }
    let n = ((hi - lo) / step).round() as usize;
    Ok((0..=n).map(|i| lo + step * i as f64).collect())
}

/// `|dk/dt - d^2k/dx^2|` by central differences at source 0.
pub fn heat_equation_residual(
    kernel: impl Fn(f64, f64, f64) -> Result<f64>,
    t: f64,
    x: f64,
    dt: f64,
    dx: f64,
) -> Result<f64> {
    check_t(t)?;
    if !(dt > 0.0 && dt < t) {
        return Err(invalid("need 0 < dt < t"));
    }
    if !(dx > 0.0) || dt > 0.1 * t || dx > 0.1 * t.sqrt() {
        return Err(invalid("finite-difference steps too large for this time"));
    }
    let kt = (kernel(t + dt, 0.0, x)? - kernel(t - dt, 0.0, x)?) / (2.0 * dt);
    let kxx = (kernel(t, 0.0, x + dx)? - 2.0 * kernel(t, 0.0, x)? + kernel(t, 0.0, x - dx)?) / (dx * dx);
    Ok((kt - kxx).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub squared_norms: Vec<f64>,
}

/// Least-squares slope of `log int k(t)^2` against `log t`.
pub fn l2_norm_decay_check(variant: AnalyticKernel, t_list: &[f64]) -> Result<DecayFit> {
    if t_list.len() < 2 {
        return Err(invalid("need at least two times to fit a slope"));
    }
    if t_list.windows(2).any(|w| !(w[1] > w[0])) || t_list[0] <= 0.0 {
        return Err(invalid("times must be positive and increasing"));
    }
    let norms: Vec<f64> = t_list.iter().map(|&t| variant.squared_norm(t)).collect::<Result<_>>()?;
    let xs: Vec<f64> = t_list.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("degenerate fit"));
    }
    let slope = sxy / sxx;
    Ok(DecayFit {
        slope,
        intercept: my - slope * mx,
        squared_norms: norms,
    })
}
