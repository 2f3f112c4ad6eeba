//! Spectral normalization of weight matrices by power iteration.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub power_iters: usize,
    /// Multiplier applied after normalization.
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            power_iters: 20,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormalized {
    pub weight: Tensor,
    /// Largest singular value estimate of the input matrix.
    pub sigma: f64,
    /// Set when the input was the zero matrix and was returned unchanged.
    pub zero_matrix: bool,
}

/// Divides `weight` by its power-iteration estimate of the largest singular
/// value.
pub fn spectral_normalize(weight: &Tensor, power_iters: usize) -> Result<SpectralNormalized> {
    spectral_normalize_scaled(weight, power_iters, 1.0)
}

pub fn spectral_normalize_scaled(
    weight: &Tensor,
    power_iters: usize,
    scale: f64,
) -> Result<SpectralNormalized> {
    if power_iters == 0 {
        return Err(invalid("power_iters must be at least 1"));
    }
    let (_, _, sigma) = power_iteration(weight, power_iters);
    if sigma <= f64::MIN_POSITIVE {
        return Ok(SpectralNormalized {
            weight: weight.clone(),
            sigma: 0.0,
            zero_matrix: true,
        });
    }
    Ok(SpectralNormalized {
        weight: weight.map(|w| w * scale / sigma),
        sigma,
        zero_matrix: false,
    })
}

/// Left/right singular vector estimates and `sigma = u^T W v`.
pub(crate) fn power_iteration(weight: &Tensor, iters: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let (r, c) = weight.dims();
    let w = weight.data();
    // Deterministic, non-symmetric start so results are reproducible.
    let mut v: Vec<f64> = (0..c)
        .map(|j| 1.0 + 0.37 * ((j * 7919 % 13) as f64) / 13.0)
        .collect();
    normalize(&mut v);
    let mut u = vec![0.0; r];
    for _ in 0..iters.max(1) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = (0..c).map(|j| w[i * c + j] * v[j]).sum();
        }
        if normalize(&mut u) == 0.0 {
            return (u, v, 0.0);
        }
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..r).map(|i| w[i * c + j] * u[i]).sum();
        }
        if normalize(&mut v) == 0.0 {
            return (u, v, 0.0);
        }
    }
    let sigma = (0..r)
        .map(|i| u[i] * (0..c).map(|j| w[i * c + j] * v[j]).sum::<f64>())
        .sum();
    (u, v, sigma)
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let s = spectral_normalize(&w, 50).unwrap();
        assert!((s.sigma - 3.0).abs() < 1e-12);
        let expected = [1.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in s.weight.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_unchanged() {
        let s = spectral_normalize(&Tensor::identity(4), 1).unwrap();
        assert!((s.sigma - 1.0).abs() < 1e-14);
        for (a, b) in s.weight.data().iter().zip(Tensor::identity(4).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_matrix_flagged() {
        let s = spectral_normalize(&Tensor::zeros(3, 2), 5).unwrap();
        assert!(s.zero_matrix);
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.weight, Tensor::zeros(3, 2));
    }

    #[test]
    fn post_scale() {
        let w = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let s = spectral_normalize_scaled(&w, 3, 2.0).unwrap();
        assert!((s.sigma - 5.0).abs() < 1e-12);
        assert!((s.weight.data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(spectral_normalize(&Tensor::identity(2), 0).is_err());
    }
}
