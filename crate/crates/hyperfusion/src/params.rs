//! Named parameters and the store that owns them.
//!
//! Parameters are partitioned three ways: `phi` (hypernetwork weights),
//! `theta_p` (internal primary-network weights), and `theta_h` (parameters
//! *generated* by the hypernetwork). Generated parameters are never
//! trainable and never regularized; the optimizer and the weight-decay sum
//! only ever see the first two partitions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    #[serde(rename = "phi")]
    Phi,
    #[serde(rename = "theta_p")]
    ThetaP,
    #[serde(rename = "theta_h")]
    ThetaH,
}

/// A named tensor with training metadata.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub regularized: bool,
    pub partition: Partition,
}

impl Parameter {
    /// Checked constructor: theta_H implies non-trainable, non-regularized.
    pub fn new(
        name: &str,
        value: Tensor,
        trainable: bool,
        regularized: bool,
        partition: Partition,
    ) -> Result<Self, TensorError> {
        if partition == Partition::ThetaH && (trainable || regularized) {
            return Err(TensorError::InvalidPartition {
                name: name.to_string(),
            });
        }
        let grad = Tensor::zeros(value.shape());
        Ok(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
            regularized,
            partition,
        })
    }

    /// Trainable, weight-decayed parameter (phi or theta_P).
    pub fn trainable(name: &str, value: Tensor, partition: Partition) -> Self {
        Parameter::new(name, value, true, true, partition).expect("trainable partition")
    }

    /// Trainable parameter excluded from weight decay (e.g. BN gamma/beta,
    /// PReLU slopes, biases would also qualify but the paper decays them).
    pub fn trainable_unregularized(name: &str, value: Tensor, partition: Partition) -> Self {
        Parameter::new(name, value, true, false, partition).expect("trainable partition")
    }

    /// Non-trainable buffer (running statistics).
    pub fn buffer(name: &str, value: Tensor) -> Self {
        Parameter::new(name, value, false, false, Partition::ThetaP).expect("buffer partition")
    }

    /// A parameter produced by the hypernetwork.
    pub fn generated(name: &str, value: Tensor) -> Self {
        Parameter::new(name, value, false, false, Partition::ThetaH).expect("generated partition")
    }
}

/// Ordered collection of named parameters. Iteration follows insertion
/// order so training runs are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) {
        assert!(
            !self.index.contains_key(&p.name),
            "duplicate parameter name `{}`",
            p.name
        );
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter, TensorError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter, TensorError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.trainable)
    }

    /// Register `name` on the tape as a leaf carrying the current value.
    pub fn use_param(&self, tape: &mut Tape, name: &str) -> Result<usize, TensorError> {
        let p = self.get(name)?;
        Ok(tape.param_leaf(name, p.value.clone()))
    }

    /// Copy gradients accumulated on `tape` back into `grad` fields.
    /// Parameters bound to the tape but unreached by backward get zeros.
    pub fn absorb_grads(&mut self, tape: &Tape) {
        for (name, node) in tape.param_bindings() {
            if let Some(&i) = self.index.get(name) {
                match tape.grad(*node) {
                    Some(g) => self.params[i].grad = g.clone(),
                    None => self.params[i].grad = Tensor::zeros(self.params[i].value.shape()),
                }
            }
        }
    }

    /// Zero all gradient buffers.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Total number of scalar values in trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.trainable().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_params_cannot_be_trainable() {
        let err = Parameter::new("g", Tensor::scalar(0.0), true, false, Partition::ThetaH)
            .unwrap_err();
        assert!(matches!(err, TensorError::InvalidPartition { .. }));
        let err = Parameter::new("g", Tensor::scalar(0.0), false, true, Partition::ThetaH)
            .unwrap_err();
        assert!(matches!(err, TensorError::InvalidPartition { .. }));
        assert!(Parameter::new("g", Tensor::scalar(0.0), false, false, Partition::ThetaH).is_ok());
    }

    #[test]
    fn absorb_grads_round_trips_through_tape() {
        let mut store = ParameterStore::new();
        store.insert(Parameter::trainable(
            "w",
            Tensor::from_vec(vec![2.0, 3.0]),
            Partition::ThetaP,
        ));
        let mut tape = Tape::new();
        let w = store.use_param(&mut tape, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        store.absorb_grads(&tape);
        assert_eq!(store.get("w").unwrap().grad.data(), &[4.0, 6.0]);
    }

    #[test]
    fn unbound_params_get_zero_grads() {
        let mut store = ParameterStore::new();
        store.insert(Parameter::trainable(
            "unused",
            Tensor::from_vec(vec![1.0]),
            Partition::Phi,
        ));
        let mut tape = Tape::new();
        let node = store.use_param(&mut tape, "unused").unwrap();
        let other = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.mul(other, other).unwrap();
        tape.backward(loss).unwrap();
        store.absorb_grads(&tape);
        assert_eq!(store.get("unused").unwrap().grad.data(), &[0.0]);
        let _ = node;
    }
}
