//! Adam optimizer over flat parameter slices, plus the named parameter set
//! shared by the neural model components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::{Graph, NodeId};
use super::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment state; one slot per scalar parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction. Deterministic given inputs.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step length mismatch: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Ordered, named collection of weight tensors. The entry order is fixed at
/// construction and defines the flattening used by the optimizer, so training
/// is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entry(&self, idx: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[idx];
        (n, t)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Enters every tensor as a leaf of `graph`; ids align with entry order.
    pub fn leaves(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| graph.leaf(t.clone())).collect()
    }

    /// Applies one Adam step given per-entry gradients (aligned with entry
    /// order, e.g. from `Graph::backward` through the ids of `leaves`).
    pub fn apply_grads(
        &mut self,
        grads: &[Tensor],
        state: &mut AdamState,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.entries.len()
            )));
        }
        let mut flat_p: Vec<f64> = Vec::with_capacity(self.total_scalars());
        let mut flat_g: Vec<f64> = Vec::with_capacity(self.total_scalars());
        for ((_, t), g) in self.entries.iter().zip(grads) {
            if t.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            flat_p.extend_from_slice(t.data());
            flat_g.extend_from_slice(g.data());
        }
        adam_step(&mut flat_p, &flat_g, state, cfg)?;
        let mut off = 0;
        for (_, t) in self.entries.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat_p[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
