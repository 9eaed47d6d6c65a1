use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// First tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.0
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Errors unless both sets have identical names and shapes.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter sets differ in size: {} vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.0.iter().zip(&other.0) {
            if na != nb {
                return Err(Error::InvalidArgument(format!(
                    "parameter name mismatch: `{na}` vs `{nb}`"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{na}`: shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every tensor on the tape, trainable or constant.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundParams {
        BoundParams(
            self.0
                .iter()
                .map(|(n, t)| {
                    let v = if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    };
                    (n.clone(), v)
                })
                .collect(),
        )
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams(BTreeMap<String, Var>);

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not bound")))
    }

    /// Gradients after `backward`, keyed like the bound set.
    pub fn grads(&self, tape: &Tape) -> ParamSet {
        self.0
            .iter()
            .map(|(n, &v)| {
                let g = tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(&tape.shape(v)));
                (n.clone(), g)
            })
            .collect()
    }
}
