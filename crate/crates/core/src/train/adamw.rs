//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! The update runs on plain tensor maps so tests can drive it with synthetic
//! one-parameter problems; the trainer passes the model store directly.
//! Moments are kept in f64 and serialized as JSON so a checkpoint round-trip
//! is bit-exact.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Numerical(format!("optimizer state not serializable: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::CorruptModel(format!("optimizer state {}: {e}", path.display())))
    }
}

/// What one step did, for logging and for the step-rejection contract.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// False when the gradient contained a non-finite value; parameters and
    /// optimizer state are untouched in that case.
    pub applied: bool,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Multiplier applied to every gradient element (1.0 when under the cap).
    pub clip_scale: f64,
}

/// One AdamW step over `tensors` in place. Gradients are taken per tensor
/// name; a missing or misshaped entry is a contract violation. Clipping
/// rescales the whole gradient so its global l2 norm is at most `clip_norm`.
pub fn optimizer_step(
    tensors: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamWState,
    lr: f64,
    clip_norm: f64,
    weight_decay: f64,
) -> Result<StepReport> {
    let mut sq = 0.0f64;
    let mut finite = true;
    for (name, t) in tensors.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter '{name}'")))?;
        if g.shape() != t.shape() {
            return Err(Error::contract(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                g.shape(),
                t.shape()
            )));
        }
        for &x in g.data() {
            let x = x as f64;
            if !x.is_finite() {
                finite = false;
            }
            sq += x * x;
        }
    }
    let grad_norm = sq.sqrt();
    if !finite || !grad_norm.is_finite() {
        return Ok(StepReport { applied: false, grad_norm: f64::NAN, clip_scale: 0.0 });
    }

    let clip_scale =
        if grad_norm > clip_norm && grad_norm > 0.0 { clip_norm / grad_norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    for (name, tensor) in tensors.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let n = tensor.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::contract(format!(
                "optimizer state for '{name}' has {} entries, parameter has {n}",
                m.len()
            )));
        }
        let data = tensor.data_mut();
        for i in 0..n {
            let gi = g.data()[i] as f64 * clip_scale;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            let p = data[i] as f64;
            data[i] = (p - lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * p)) as f32;
        }
    }
    Ok(StepReport { applied: true, grad_norm, clip_scale })
}
