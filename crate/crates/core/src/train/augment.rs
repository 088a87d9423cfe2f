//! Channel-count and reference augmentation.
//!
//! Each training sample re-draws which microphone acts as the reference, how
//! many channels the model sees, and the order of the remaining channels.
//! The target always follows the drawn reference: it is that channel's
//! reverberant clean signal, so the label stays aligned with input channel 0
//! no matter what was drawn.

use crate::error::{Error, Result};
use crate::sim::MultichannelRecording;
use rand::seq::SliceRandom;
use rand::Rng;

/// One augmented view of a recording. `channels[0]` is the drawn reference.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub channels: Vec<Vec<f32>>,
    /// Reverberant clean signal at the drawn reference microphone.
    pub target: Vec<f32>,
}

/// The draws behind a sample, separated from the waveforms so an epoch's
/// randomness can be fixed up front and the heavy copies done in parallel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentPlan {
    /// Source channel index for each model input; `order[0]` is the reference.
    pub order: Vec<usize>,
}

/// Draw a plan: channel count uniform in `c_range`, reference uniform over
/// all microphones, then a shuffle of the others filling the remaining slots.
pub fn plan(rng: &mut impl Rng, c_max: usize, c_range: [usize; 2]) -> Result<AugmentPlan> {
    let [lo, hi] = c_range;
    if lo < 1 || lo > hi {
        return Err(Error::Config(format!("channel range [{lo}, {hi}] is not a valid range")));
    }
    if hi > c_max {
        return Err(Error::Config(format!(
            "channel range reaches {hi} but the recording has {c_max} microphones"
        )));
    }
    let c = rng.gen_range(lo..=hi);
    let reference = rng.gen_range(0..c_max);
    let mut others: Vec<usize> = (0..c_max).filter(|&i| i != reference).collect();
    others.shuffle(rng);
    let mut order = Vec::with_capacity(c);
    order.push(reference);
    order.extend(others.into_iter().take(c - 1));
    Ok(AugmentPlan { order })
}

/// Materialize a plan against a recording, slicing `[start, start + len)`.
pub fn apply(rec: &MultichannelRecording, p: &AugmentPlan, start: usize, len: usize) -> Result<TrainSample> {
    let end = start + len;
    if end > rec.len() || len == 0 {
        return Err(Error::contract(format!(
            "segment [{start}, {end}) outside recording of {} samples",
            rec.len()
        )));
    }
    if p.order.iter().any(|&i| i >= rec.n_channels()) {
        return Err(Error::contract("plan indexes a channel the recording lacks"));
    }
    let channels =
        p.order.iter().map(|&i| rec.noisy[i][start..end].to_vec()).collect();
    let target = rec.reverberant_clean[p.order[0]][start..end].to_vec();
    Ok(TrainSample { channels, target })
}
