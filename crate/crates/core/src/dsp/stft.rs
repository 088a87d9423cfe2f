//! Forward/inverse STFT with periodic Hann windowing.

use super::{DspConfig, Spectrogram};
use crate::error::{Error, Result};
use num_complex::Complex64;
use rustfft::FftPlanner;

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Number of analysis frames for a signal of `len` samples:
/// `ceil((len + win_len - hop) / hop)`. The tail is zero-padded, so every
/// input sample is covered and the last frames may be partly or fully zero.
pub fn frame_count(len: usize, cfg: &DspConfig) -> usize {
    (len + cfg.win_len - cfg.hop + cfg.hop - 1) / cfg.hop
}

pub fn stft(x: &[f32], cfg: &DspConfig) -> Result<Spectrogram> {
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    stft_f64(&xf, cfg)
}

pub fn stft_f64(x: &[f64], cfg: &DspConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::invalid("stft of an empty signal"));
    }
    let t = frame_count(x.len(), cfg);
    Ok(stft_frames(x, t, cfg))
}

/// Windowed transform of single frames, shared by batch and streaming paths
/// so both produce bit-identical spectra and segments.
pub struct FrameDft {
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    pub win: Vec<f64>,
    win_len: usize,
    n_bins: usize,
}

impl FrameDft {
    pub fn new(cfg: &DspConfig) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        FrameDft {
            fwd: planner.plan_fft_forward(cfg.win_len),
            inv: planner.plan_fft_inverse(cfg.win_len),
            win: hann_periodic(cfg.win_len),
            win_len: cfg.win_len,
            n_bins: cfg.win_len / 2 + 1,
        }
    }

    /// Window and transform one frame of `win_len` samples to `n_bins` bins.
    pub fn analyze(&self, samples: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(samples.len(), self.win_len);
        let mut buf: Vec<Complex64> = samples
            .iter()
            .zip(&self.win)
            .map(|(&v, &w)| Complex64::new(v * w, 0.0))
            .collect();
        self.fwd.process(&mut buf);
        buf.truncate(self.n_bins);
        buf
    }

    /// Invert one half-spectrum row to a windowed time segment of `win_len`
    /// samples (pre-normalization); the matching per-sample weight is
    /// `win[n]^2`.
    pub fn synth(&self, row: &[Complex64]) -> Vec<f64> {
        debug_assert_eq!(row.len(), self.n_bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win_len];
        buf[..self.n_bins].copy_from_slice(row);
        for k in self.n_bins..self.win_len {
            buf[k] = row[self.win_len - k].conj();
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / self.win_len as f64; // rustfft leaves the inverse unscaled
        buf.iter().zip(&self.win).map(|(b, &w)| b.re * scale * w).collect()
    }
}

/// Analyze exactly `n_frames` frames anchored at multiples of `hop`, reading
/// zeros past the end of `x`. Phase refinement re-analyzes on the same frame
/// grid as the forward transform, which is why the frame count is explicit.
pub fn stft_frames(x: &[f64], n_frames: usize, cfg: &DspConfig) -> Spectrogram {
    let dft = FrameDft::new(cfg);
    let n_bins = cfg.n_bins();
    let mut spec = Spectrogram::zeros(*cfg, n_frames);
    let mut frame = vec![0.0f64; cfg.win_len];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (n, s) in frame.iter_mut().enumerate() {
            *s = x.get(start + n).copied().unwrap_or(0.0);
        }
        let row = dft.analyze(&frame);
        spec.data[t * n_bins..(t + 1) * n_bins].copy_from_slice(&row);
    }
    spec
}

pub fn istft(spec: &Spectrogram) -> Vec<f32> {
    istft_f64(spec).into_iter().map(|v| v as f32).collect()
}

/// Weighted overlap-add synthesis. Each frame is windowed again on synthesis
/// and the result is normalized per sample by the accumulated squared window,
/// which makes `istft(stft(x))` exact wherever that accumulation is
/// appreciable (everywhere except the first/last partial window).
///
/// Output length is `(n_frames - 1) * hop + win_len`; callers trim.
pub fn istft_f64(spec: &Spectrogram) -> Vec<f64> {
    let cfg = &spec.cfg;
    let dft = FrameDft::new(cfg);
    let out_len = (spec.n_frames.max(1) - 1) * cfg.hop + cfg.win_len;
    let mut acc = vec![0.0f64; out_len];
    let mut wsq = vec![0.0f64; out_len];
    let n_bins = spec.n_bins;
    for t in 0..spec.n_frames {
        let seg = dft.synth(&spec.data[t * n_bins..(t + 1) * n_bins]);
        let start = t * cfg.hop;
        for n in 0..cfg.win_len {
            acc[start + n] += seg[n];
            wsq[start + n] += dft.win[n] * dft.win[n];
        }
    }
    normalize_ola(&mut acc, &wsq);
    acc
}

/// Shared OLA normalization: divide by the accumulated squared window where
/// it is appreciable, zero elsewhere. Streaming synthesis applies the same
/// rule so both paths agree sample for sample.
pub(crate) fn normalize_ola(acc: &mut [f64], wsq: &[f64]) {
    for (a, &w) in acc.iter_mut().zip(wsq) {
        if w > 1e-8 {
            *a /= w;
        } else {
            *a = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> DspConfig {
        DspConfig::default()
    }

    /// Independent brute-force windowed DFT of one frame.
    fn dft_oracle(x: &[f64], start: usize, cfg: &DspConfig) -> Vec<Complex64> {
        let win = hann_periodic(cfg.win_len);
        let n = cfg.win_len as f64;
        (0..cfg.n_bins())
            .map(|k| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, w) in win.iter().enumerate() {
                    let v = x.get(start + i).copied().unwrap_or(0.0) * w;
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n;
                    acc += Complex64::new(v * ang.cos(), v * ang.sin());
                }
                acc
            })
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        let c = cfg();
        // ceil((len + 256) / 256)
        assert_eq!(frame_count(16000, &c), 64);
        assert_eq!(frame_count(64000, &c), 251);
        assert_eq!(frame_count(256, &c), 2);
        assert_eq!(frame_count(257, &c), 3);
        assert_eq!(frame_count(1, &c), 2);
    }

    #[test]
    fn zero_signal_gives_zero_grid() {
        let c = cfg();
        let spec = stft(&vec![0.0f32; 16000], &c).unwrap();
        assert_eq!(spec.n_frames, 64);
        assert_eq!(spec.n_bins, 257);
        assert!(spec.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn empty_signal_is_an_error() {
        assert!(stft(&[], &cfg()).is_err());
    }

    #[test]
    fn matches_brute_force_dft() {
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft_f64(&x, &c).unwrap();
        for &t in &[0usize, 3, 5] {
            let oracle = dft_oracle(&x, t * c.hop, &c);
            for f in 0..c.n_bins() {
                let d = (spec.at(t, f) - oracle[f]).norm();
                assert!(d < 1e-9, "frame {} bin {}: {}", t, f, d);
            }
        }
    }

    #[test]
    fn linearity() {
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -2.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(&u, &v)| a * u + b * v).collect();
        let sx = stft_f64(&x, &c).unwrap();
        let sy = stft_f64(&y, &c).unwrap();
        let sm = stft_f64(&mix, &c).unwrap();
        let scale = sm.mag_norm().max(1.0);
        for i in 0..sm.data.len() {
            let want = a * sx.data[i] + b * sy.data[i];
            assert!((sm.data[i] - want).norm() / scale < 1e-12);
        }
    }

    #[test]
    fn sinusoid_energy_concentrates_on_its_bin() {
        // Bin-centered sinusoid: the Hann main lobe spans k-1..=k+1, holding
        // essentially all frame energy, with the peak at bin k. A single bin
        // alone holds ~2/3 of the energy (0.5 / (0.5^2 + 2*0.25^2) pattern),
        // so concentration is asserted over the three-bin main lobe.
        let c = cfg();
        let k = 20usize;
        let n = 16000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / c.win_len as f64).sin())
            .collect();
        let spec = stft_f64(&x, &c).unwrap();
        for t in 2..spec.n_frames - 4 {
            let energies: Vec<f64> = (0..c.n_bins()).map(|f| spec.at(t, f).norm_sqr()).collect();
            let total: f64 = energies.iter().sum();
            let lobe = energies[k - 1] + energies[k] + energies[k + 1];
            assert!(lobe / total > 0.99, "frame {}: lobe fraction {}", t, lobe / total);
            let argmax = energies
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k);
            let single = energies[k] / total;
            assert!((0.60..0.75).contains(&single), "single-bin fraction {}", single);
        }
    }

    #[test]
    fn roundtrip_reconstructs_interior() {
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft_f64(&x, &c).unwrap();
        let y = istft_f64(&spec);
        assert!(y.len() >= x.len());
        let peak = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for n in c.win_len..x.len() - c.win_len {
            let err = (y[n] - x[n]).abs() / peak;
            assert!(err < 1e-6, "sample {}: rel err {}", n, err);
        }
    }

    #[test]
    fn zero_spectrogram_synthesizes_silence() {
        let spec = Spectrogram::zeros(cfg(), 10);
        let y = istft_f64(&spec);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_flat_spectrum_matches_hand_ola() {
        // A one-frame spectrogram that is 1 at every bin corresponds to a
        // unit impulse at sample 0 before windowing (inverse DFT of the
        // all-ones Hermitian spectrum). Hand-compute the synthesis path:
        // frame = delta, windowed by w, normalized by w^2 where appreciable.
        let c = cfg();
        let mut spec = Spectrogram::zeros(c, 1);
        for f in 0..spec.n_bins {
            *spec.at_mut(0, f) = Complex64::new(1.0, 0.0);
        }
        let y = istft_f64(&spec);
        let win = hann_periodic(c.win_len);
        for n in 0..c.win_len {
            // inverse FFT of all-ones full spectrum = delta at n=0
            let frame = if n == 0 { 1.0 } else { 0.0 };
            let expect = if win[n] * win[n] > 1e-8 { win[n] * frame / (win[n] * win[n]) } else { 0.0 };
            assert!((y[n] - expect).abs() < 1e-9, "n={}: {} vs {}", n, y[n], expect);
        }
    }

    #[test]
    fn f32_wrapper_matches_f64_path() {
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x32: Vec<f32> = (0..4000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let s = stft(&x32, &c).unwrap();
        let back = istft(&s);
        let peak = x32.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        for n in c.win_len..x32.len() - c.win_len {
            assert!((back[n] - x32[n]).abs() / peak < 1e-5);
        }
    }
}
