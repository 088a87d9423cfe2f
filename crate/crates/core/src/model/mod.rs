//! The enhancement network: a three-stage channel-count-agnostic mask
//! estimator.
//!
//! Stage 1 refines each channel independently with a shared dual-path block,
//! then collapses channels through reference-query attention. Stage 2 pairs
//! the fused reference with each raw channel, refines again, and collapses
//! again. Stage 3 post-refines the fused representation before a transposed
//! convolutional decoder emits a real mask over the reference spectrogram.
//! Every cross-channel step is either shared per channel or a set operation,
//! so one parameter set serves any microphone count.

pub mod cost;
pub mod enhance;
pub mod features;
pub mod net;
pub mod params;
pub mod stream;

pub use cost::macs_per_frame;
pub use enhance::{enhance, reconstruct_from_mask};
pub use features::ChannelFeatures;
pub use net::{forward_mask, forward_mask_with};
pub use params::ModelParams;
pub use stream::{enhance_streaming, StreamEngine};

use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which structural variant to build. Used for cost/quality comparisons; the
/// default full model keeps all three stages with attention fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Drop the per-channel refinement and first fusion; encoder outputs feed
    /// stage 2 directly.
    NoStage1,
    /// Drop the pair-wise alignment stage; the stage-1 fusion feeds stage 3.
    NoStage2,
    /// Drop the post-refinement block.
    NoStage3,
    /// Replace both attention fusions with transform-average-concatenate.
    Tac,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-stage1" => Ok(Ablation::NoStage1),
            "no-stage2" => Ok(Ablation::NoStage2),
            "no-stage3" => Ok(Ablation::NoStage3),
            "tac" => Ok(Ablation::Tac),
            other => Err(Error::invalid(format!(
                "unknown ablation '{}' (expected none|no-stage1|no-stage2|no-stage3|tac)",
                other
            ))),
        }
    }
}

/// Architecture hyperparameters. `d` is the hidden width everywhere; the
/// encoder halves the frequency axis `n_enc` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub dsp: DspConfig,
    pub d: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub kt: usize,
    pub kf: usize,
    pub stride_f: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            dsp: DspConfig::default(),
            d: 20,
            heads: 4,
            n_enc: 3,
            kt: 3,
            kf: 3,
            stride_f: 2,
            ablation: Ablation::None,
        }
    }
}

impl Hyper {
    /// Small configuration for fast tests and gradient checks.
    pub fn toy() -> Self {
        Hyper { d: 8, heads: 2, ..Hyper::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.n_enc == 0 || self.kt == 0 || self.kf % 2 != 1 || self.stride_f == 0 {
            return Err(Error::Config(
                "encoder needs n_enc >= 1, kt >= 1, odd kf, stride_f >= 1".into(),
            ));
        }
        if self.enc_out_bins() < 2 {
            return Err(Error::Config(format!(
                "{} encoder blocks collapse {} bins to nothing",
                self.n_enc,
                self.dsp.n_bins()
            )));
        }
        Ok(())
    }

    /// Frequency bins after one conv block applied to `f` bins.
    fn f_after_block(&self, f: usize) -> usize {
        (f + (self.kf - 1) - self.kf) / self.stride_f + 1
    }

    /// Frequency width of the hidden representation.
    pub fn enc_out_bins(&self) -> usize {
        let mut f = self.dsp.n_bins();
        for _ in 0..self.n_enc {
            f = self.f_after_block(f);
        }
        f
    }

    /// Frequency widths entering each encoder block, ending with the hidden
    /// width; the decoder consumes this in reverse.
    pub fn f_ladder(&self) -> Vec<usize> {
        let mut f = self.dsp.n_bins();
        let mut out = vec![f];
        for _ in 0..self.n_enc {
            f = self.f_after_block(f);
            out.push(f);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frequency_ladder() {
        let h = Hyper::default();
        assert_eq!(h.f_ladder(), vec![257, 129, 65, 33]);
        assert_eq!(h.enc_out_bins(), 33);
    }

    #[test]
    fn validate_rejects_bad_heads() {
        let h = Hyper { d: 10, heads: 4, ..Hyper::default() };
        assert!(h.validate().is_err());
        assert!(Hyper::default().validate().is_ok());
        assert!(Hyper::toy().validate().is_ok());
    }

    #[test]
    fn ablation_parses() {
        assert_eq!("tac".parse::<Ablation>().unwrap(), Ablation::Tac);
        assert_eq!("no-stage2".parse::<Ablation>().unwrap(), Ablation::NoStage2);
        assert!("stage9".parse::<Ablation>().is_err());
    }
}
