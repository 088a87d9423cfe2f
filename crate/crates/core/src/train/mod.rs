//! Optimization loop, objective, and gradient validation.
//!
//! Scaled for a desktop CPU: utterances load fully into memory, gradients
//! for a batch are computed in parallel and reduced in a fixed order, and
//! the optimizer runs serialized, so a fixed seed reproduces runs bit for
//! bit on any thread count.

mod adamw;
mod augment;
mod check;
mod loss;
mod trainer;

pub use adamw::{optimizer_step, AdamWState, StepReport, ADAM_EPS, BETA1, BETA2};
pub use augment::{apply, plan, AugmentPlan, TrainSample};
pub use check::{fd_check, grad_check, grad_check_linear, GradCheckReport, PROBES_PER_TENSOR};
pub use loss::{loss_grids, spectral_loss, LossGrids};
pub use trainer::{
    train_toy, EpochStats, ResumeRecord, TrainOutcome, BEST_PARAMS, CURVES, LAST_OPT, LAST_PARAMS,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Knobs of the optimization loop. Losses weight the compressed-magnitude
/// and compressed-complex terms; `c_range` bounds the per-sample channel
/// draw (`[1, 1]` trains a monaural model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Segments per optimizer step.
    pub batch: usize,
    pub segment_seconds: f64,
    pub mag_weight: f64,
    pub complex_weight: f64,
    pub c_range: [usize; 2],
    /// Fraction of the manifest held out for validation (at least one
    /// utterance; a single-utterance manifest validates on the training
    /// utterance).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            lr_decay: 0.98,
            clip_norm: 5.0,
            weight_decay: 1e-2,
            epochs: 15,
            batch: 2,
            segment_seconds: 4.0,
            mag_weight: 1.0,
            complex_weight: 1.0,
            c_range: [1, 6],
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay {} must be in (0, 1]", self.lr_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.mag_weight < 0.0 || self.complex_weight < 0.0 {
            return Err(Error::Config("weights must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment length must be positive".into()));
        }
        if self.c_range[0] < 1 || self.c_range[0] > self.c_range[1] {
            return Err(Error::Config(format!(
                "channel range [{}, {}] is not a valid range",
                self.c_range[0], self.c_range[1]
            )));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must be in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Exponential schedule: `lr0 * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}
