use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Unary, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};
use crate::kernels::spectral::{power_iteration, SpectralConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    /// `U(-a, a)` with `a = sqrt(6 / fan_in)`.
    HeUniform,
}

/// Layer widths (input first) and one activation per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub init: Init,
    /// Multiplier on the initialization range.
    #[serde(default = "one")]
    pub init_gain: f64,
}

fn one() -> f64 {
    1.0
}

impl MlpSpec {
    /// `widths.len() - 1` layers, `hidden` activation on all but the last,
    /// identity on the output.
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Self {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![hidden; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec {
            widths,
            activations,
            init: Init::XavierUniform,
            init_gain: 1.0,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.init_gain = gain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(invalid("an MLP needs at least one layer"));
        }
        if self.widths.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(invalid(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.widths.len() - 1
            )));
        }
        if !(self.init_gain.is_finite() && self.init_gain >= 0.0) {
            return Err(invalid("init_gain must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Fully connected network `x -> act(x W + b)` per layer, with weights
/// stored `fan_in x fan_out` in a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<(ParamId, ParamId)>,
    pub spectral: Option<SpectralConfig>,
}

impl Mlp {
    pub fn new(
        spec: MlpSpec,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for l in 0..spec.widths.len() - 1 {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let bound = spec.init_gain
                * match spec.init {
                    Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
                };
            let w = Tensor::from_fn(fan_in, fan_out, |_, _| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            });
            let wid = store.add(format!("{prefix}.w{l}"), w);
            let bid = store.add(format!("{prefix}.b{l}"), Tensor::zeros(1, fan_out));
            layers.push((wid, bid));
        }
        Ok(Mlp {
            spec,
            layers,
            spectral: None,
        })
    }

    /// Single linear layer with `W = I`, `b = 0`.
    pub fn identity(dim: usize, store: &mut ParamStore, prefix: &str) -> Self {
        let wid = store.add(format!("{prefix}.w0"), Tensor::identity(dim));
        let bid = store.add(format!("{prefix}.b0"), Tensor::zeros(1, dim));
        Mlp {
            spec: MlpSpec {
                widths: vec![dim, dim],
                activations: vec![Activation::Identity],
                init: Init::XavierUniform,
                init_gain: 1.0,
            },
            layers: vec![(wid, bid)],
            spectral: None,
        }
    }

    pub fn with_spectral(mut self, cfg: Option<SpectralConfig>) -> Self {
        self.spectral = cfg;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn weight(&self, tape: &mut Tape, p: &[Var], layer: usize) -> Result<Var> {
        let w = p[self.layers[layer].0 .0];
        let Some(cfg) = self.spectral else {
            return Ok(w);
        };
        let (u, v, sigma) = power_iteration(tape.value(w), cfg.power_iters);
        if sigma <= f64::MIN_POSITIVE {
            return Ok(w);
        }
        // sigma = u^T W v with the singular vectors held constant.
        let u = tape.leaf(Tensor::matrix(1, u.len(), u)?)?;
        let v = tape.leaf(Tensor::matrix(v.len(), 1, v)?)?;
        let uw = tape.matmul(u, w)?;
        let s = tape.matmul(uw, v)?;
        let normalized = tape.div(w, s)?;
        if cfg.scale == 1.0 {
            Ok(normalized)
        } else {
            tape.scale(normalized, cfg.scale)
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        Ok(self.run(tape, p, x, false)?.0)
    }

    /// Output together with the per-row squared Frobenius norm of the
    /// input Jacobian, `n x 1`. Both are differentiable with respect to the
    /// parameters and the input.
    pub fn forward_with_jacobian(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let (out, jac) = self.run(tape, p, x, true)?;
        Ok((out, jac.expect("jacobian requested")))
    }

    fn run(&self, tape: &mut Tape, p: &[Var], x: Var, jacobian: bool) -> Result<(Var, Option<Var>)> {
        let (n, d) = tape.value(x).dims();
        if d != self.input_dim() {
            return Err(crate::error::Error::ShapeMismatch {
                op: "Mlp::forward",
                lhs: vec![n, d],
                rhs: vec![self.input_dim()],
            });
        }
        let weights: Vec<Var> = (0..self.layers.len())
            .map(|l| self.weight(tape, p, l))
            .collect::<Result<_>>()?;
        let mut h = x;
        let mut derivs: Vec<Option<Var>> = Vec::with_capacity(self.layers.len());
        for (l, &(_, bid)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, weights[l])?;
            let z = tape.add(z, p[bid.0])?;
            let (out, deriv) = match self.spec.activations[l] {
                Activation::Identity => (z, None),
                Activation::Tanh => {
                    let y = tape.tanh(z)?;
                    let d = if jacobian {
                        let y2 = tape.square(y)?;
                        let neg = tape.neg(y2)?;
                        Some(tape.add_scalar(neg, 1.0)?)
                    } else {
                        None
                    };
                    (y, d)
                }
                Activation::Relu => {
                    let y = tape.relu(z)?;
                    let d = if jacobian {
                        Some(tape.unary(Unary::Step, z)?)
                    } else {
                        None
                    };
                    (y, d)
                }
                Activation::Softplus => {
                    let y = tape.unary(Unary::Softplus, z)?;
                    let d = if jacobian {
                        Some(tape.unary(Unary::Sigmoid, z)?)
                    } else {
                        None
                    };
                    (y, d)
                }
            };
            derivs.push(deriv);
            h = out;
        }
        if !jacobian {
            return Ok((h, None));
        }
        // Forward-mode tangents, one input coordinate at a time.
        let mut total = tape.leaf(Tensor::zeros(n, 1))?;
        for i in 0..d {
            let mut t = tape.slice_rows(weights[0], i, 1)?;
            for (l, deriv) in derivs.iter().enumerate() {
                if let Some(dv) = deriv {
                    t = tape.mul(*dv, t)?;
                }
                if l + 1 < self.layers.len() {
                    t = tape.matmul(t, weights[l + 1])?;
                }
            }
            let sq = tape.square(t)?;
            let s = tape.sum_cols(sq)?;
            total = tape.add(total, s)?;
        }
        Ok((h, Some(total)))
    }

    /// Evaluates without keeping a tape.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        let out = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_network_is_identity() {
        let mut s = ParamStore::new();
        let net = Mlp::identity(3, &mut s, "h");
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        assert_eq!(net.eval(&s, &x).unwrap(), x);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh).validate().is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Tanh).validate().is_err());
        assert!(MlpSpec::new(vec![3, 4, 1], Activation::Tanh).validate().is_ok());
    }

    #[test]
    fn input_dimension_checked() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(MlpSpec::new(vec![2, 4, 1], Activation::Tanh), &mut s, "h", &mut rng)
            .unwrap();
        assert!(net.eval(&s, &Tensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn identity_jacobian_norm_is_dimension() {
        let mut s = ParamStore::new();
        let net = Mlp::identity(4, &mut s, "h");
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let x = tape.leaf(Tensor::zeros(3, 4)).unwrap();
        let (_, j) = net.forward_with_jacobian(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(j).data(), &[4.0, 4.0, 4.0]);
    }
}
