use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Flat collection of named parameter arrays.
///
/// Serializes as a JSON list of `{name, value: {shape, data}}` records, which
/// is the on-disk format for trained kernels and generators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value: value.as_matrix(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedParam)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a leaf; the returned vector is indexed by
    /// [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Gradients for every bound parameter, zero where a parameter did not
    /// reach the loss.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients, bound: &[Var]) -> Vec<Tensor> {
        bound.iter().map(|&v| grads.wrt_or_zero(tape, v)).collect()
    }

    /// Replaces all values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::copy_from",
                lhs: vec![self.params.len()],
                rhs: vec![other.params.len()],
            });
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ParamStore::copy_from",
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameter store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let store: ParamStore = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "parameter file".into(),
            detail: e.to_string(),
        })?;
        for p in &store.params {
            let n: usize = p.value.shape().iter().product();
            if n != p.value.len() {
                return Err(Error::Parse {
                    what: "parameter file".into(),
                    detail: format!("{}: shape does not match data length", p.name),
                });
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::matrix(2, 1, vec![0.1, -3.0]).unwrap());
        s.add("b", Tensor::scalar(1e-17));
        let back = ParamStore::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.find("b"), Some(ParamId(1)));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::scalar(2.0));
        let _b = s.add("b", Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let mut tape = Tape::new();
        let p = s.bind(&mut tape).unwrap();
        let l = tape.square(p[a.0]).unwrap();
        let g = tape.backward(l).unwrap();
        let gs = s.collect_grads(&tape, &g, &p);
        assert_eq!(gs[0].data(), &[4.0]);
        assert_eq!(gs[1].data(), &[0.0, 0.0]);
    }
}
