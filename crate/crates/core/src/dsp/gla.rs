//! Griffin-Lim phase refinement.

use super::stft::{istft_f64, stft_frames};
use super::Spectrogram;
use crate::error::{Error, Result};
use num_complex::Complex64;

/// Iterative phase refinement toward a target magnitude.
///
/// Starting from `mag * exp(j*phase_init)`, each iteration synthesizes the
/// current spectrogram, re-analyzes it on the same frame grid, and replaces
/// the magnitude with the target while keeping the re-analyzed phase. With
/// zero iterations the initial polar combination is returned unchanged. The
/// spectral consistency error is non-increasing across iterations.
///
/// `mag` and `phase_init` are frame-major `n_frames x n_bins` grids.
pub fn griffin_lim(
    mag: &[f64],
    phase_init: &[f64],
    n_frames: usize,
    iters: usize,
    cfg: &super::DspConfig,
) -> Result<Spectrogram> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    if mag.len() != n_frames * n_bins || phase_init.len() != mag.len() {
        return Err(Error::contract(format!(
            "griffin_lim: expected {}x{} grids, got mag {} phase {}",
            n_frames,
            n_bins,
            mag.len(),
            phase_init.len()
        )));
    }
    if mag.iter().any(|&m| m < 0.0 || !m.is_finite()) {
        return Err(Error::invalid("griffin_lim: target magnitude must be finite and nonnegative"));
    }
    let mut spec = Spectrogram::zeros(*cfg, n_frames);
    for (z, (&m, &p)) in spec.data.iter_mut().zip(mag.iter().zip(phase_init)) {
        *z = Complex64::from_polar(m, p);
    }
    for _ in 0..iters {
        let wave = istft_f64(&spec);
        let reanalyzed = stft_frames(&wave, n_frames, cfg);
        for (z, (&m, r)) in spec.data.iter_mut().zip(mag.iter().zip(reanalyzed.data.iter())) {
            let rm = r.norm();
            *z = if rm > 0.0 {
                Complex64::new(m * r.re / rm, m * r.im / rm)
            } else {
                Complex64::new(m, 0.0) // undefined phase: keep magnitude on the real axis
            };
        }
    }
    Ok(spec)
}

/// `|| |STFT(iSTFT(spec))| - mag_target ||_F`: how far the spectrogram is
/// from being the transform of a real signal with the target magnitude.
pub fn consistency_error(spec: &Spectrogram, mag_target: &[f64]) -> f64 {
    let wave = istft_f64(spec);
    let re = stft_frames(&wave, spec.n_frames, &spec.cfg);
    re.data
        .iter()
        .zip(mag_target)
        .map(|(z, &m)| {
            let d = z.norm() - m;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
