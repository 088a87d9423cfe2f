//! Short-time spectral analysis and reconstruction.
//!
//! All spectral math runs in f64 internally; waveforms cross the API as f32.
//! The analysis grid is fixed by [`DspConfig`]: periodic Hann window,
//! `win_len = 2 * hop`, frames starting at multiples of `hop` with the first
//! frame anchored at sample 0 and the tail zero-padded.

mod features;
mod gla;
mod stft;

pub use features::{compress_mag, compressed_complex, phase_features, wrap_phase, PhaseDiffs};
pub use gla::{consistency_error, griffin_lim};
pub use stft::{frame_count, hann_periodic, istft, istft_f64, stft, stft_f64, stft_frames, FrameDft};

use crate::error::{Error, Result};
use num_complex::Complex64;

/// Analysis/synthesis parameters shared by the whole engine.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    /// Magnitude compression exponent, in (0, 1].
    pub compress_exp: f64,
    /// Phase-refinement iterations applied during reconstruction.
    pub gla_iters: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig { sample_rate: 16000, win_len: 512, hop: 256, compress_exp: 0.3, gla_iters: 1 }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_len == 0 || self.hop == 0 {
            return Err(Error::invalid("win_len and hop must be positive"));
        }
        if self.win_len != 2 * self.hop {
            return Err(Error::invalid(format!(
                "win_len must equal 2*hop (got win_len={}, hop={})",
                self.win_len, self.hop
            )));
        }
        if !(self.compress_exp > 0.0 && self.compress_exp <= 1.0) {
            return Err(Error::invalid("compress_exp must lie in (0, 1]"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    /// End-to-end algorithmic latency in milliseconds: one analysis window
    /// plus one phase-refinement analysis/synthesis round per iteration.
    pub fn latency_ms(&self) -> f64 {
        let win_ms = self.win_len as f64 / self.sample_rate as f64 * 1000.0;
        win_ms + self.gla_iters as f64 * win_ms
    }
}

/// Complex time-frequency grid, `n_frames x n_bins`, frame-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub cfg: DspConfig,
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(cfg: DspConfig, n_frames: usize) -> Self {
        let n_bins = cfg.n_bins();
        Spectrogram { cfg, n_frames, n_bins, data: vec![Complex64::new(0.0, 0.0); n_frames * n_bins] }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.n_bins + f]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, f: usize) -> &mut Complex64 {
        &mut self.data[t * self.n_bins + f]
    }

    /// Frobenius norm of the magnitude grid.
    pub fn mag_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}
