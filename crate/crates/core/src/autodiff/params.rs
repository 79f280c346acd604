use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use super::tape::{Bound, Gradients};
use crate::error::{invalid, Error, Result};

/// RMS-propagation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self { decay: 0.99, eps: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Parameter {
    value: DenseArray,
    grad: DenseArray,
    square_avg: DenseArray,
}

/// Named trainable arrays with their gradient accumulators and optimizer state.
///
/// Iteration order is the lexicographic order of names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        let grad = DenseArray::zeros(value.shape());
        let square_avg = DenseArray::zeros(value.shape());
        self.params.insert(name, Parameter { value, grad, square_avg });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name).map(|p| &p.grad)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: DenseArray) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                shapes: format!("{:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients recorded for `bound` leaves into the accumulators.
    /// Parameters that did not take part in the computation keep their grads.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, var) in bound.iter() {
            let Some(g) = grads.get(var) else { continue };
            let p = self.params.get_mut(name).ok_or_else(|| invalid(format!("bound parameter `{name}` not in set")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "accumulate",
                    shapes: format!("{:?} vs {:?}", p.grad.shape(), g.shape()),
                });
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One RMS-propagation update followed by zeroing every gradient.
    ///
    /// Rejects the whole step, leaving values untouched, if any gradient is
    /// non-finite.
    pub fn rmsprop_step(&mut self, learning_rate: f64, opt: &RmsProp) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        if let Some((name, _)) = self.params.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        for p in self.params.values_mut() {
            let grads = p.grad.data().to_vec();
            let sq = p.square_avg.data_mut();
            for (s, g) in sq.iter_mut().zip(&grads) {
                *s = opt.decay * *s + (1.0 - opt.decay) * g * g;
            }
            let sq = p.square_avg.data().to_vec();
            for ((v, g), s) in p.value.data_mut().iter_mut().zip(&grads).zip(&sq) {
                *v -= learning_rate * g / (s.sqrt() + opt.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Copies every value from `other`; optimizer state is left alone.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, value) in other.iter() {
            self.set(name, value.clone())?;
        }
        Ok(())
    }
}
