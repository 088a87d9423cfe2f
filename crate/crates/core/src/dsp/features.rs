//! Magnitude compression and phase-difference features.

use super::Spectrogram;
use crate::error::{Error, Result};

/// Wrap an angle to (-pi, pi].
pub fn wrap_phase(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = x.rem_euclid(two_pi); // [0, 2*pi)
    if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// `|S|^p` grid, frame-major. Zero magnitude maps to zero for any p > 0.
pub fn compress_mag(spec: &Spectrogram, p: f64) -> Vec<f64> {
    spec.data.iter().map(|z| z.norm().powf(p)).collect()
}

/// Compressed complex grid `|S|^p * exp(j*angle(S))` as (re, im) pairs.
/// The phase of a zero bin is taken as 0, so zero maps to zero.
pub fn compressed_complex(spec: &Spectrogram, p: f64) -> Vec<(f64, f64)> {
    spec.data
        .iter()
        .map(|z| {
            let m = z.norm();
            if m == 0.0 {
                (0.0, 0.0)
            } else {
                let mp = m.powf(p);
                (mp * z.re / m, mp * z.im / m)
            }
        })
        .collect()
}

/// Phase differences along time and frequency, wrapped to (-pi, pi].
#[derive(Debug, Clone)]
pub struct PhaseDiffs {
    pub n_frames: usize,
    pub n_bins: usize,
    /// `pd_time[t][f] = wrap(angle(S[t][f]) - angle(S[t-1][f]))`, zeros at t=0.
    pub pd_time: Vec<f64>,
    /// `pd_freq[t][f] = wrap(angle(S[t][f]) - angle(S[t][f-1]))`, zeros at f=0.
    pub pd_freq: Vec<f64>,
}

pub fn phase_features(spec: &Spectrogram) -> Result<PhaseDiffs> {
    if spec.n_frames == 0 {
        return Err(Error::invalid("phase features of an empty spectrogram"));
    }
    let (t_n, f_n) = (spec.n_frames, spec.n_bins);
    let angle: Vec<f64> = spec.data.iter().map(|z| z.im.atan2(z.re)).collect();
    let mut pd_time = vec![0.0; t_n * f_n];
    let mut pd_freq = vec![0.0; t_n * f_n];
    for t in 0..t_n {
        for f in 0..f_n {
            let i = t * f_n + f;
            if t > 0 {
                pd_time[i] = wrap_phase(angle[i] - angle[i - f_n]);
            }
            if f > 0 {
                pd_freq[i] = wrap_phase(angle[i] - angle[i - 1]);
            }
        }
    }
    Ok(PhaseDiffs { n_frames: t_n, n_bins: f_n, pd_time, pd_freq })
}
