//! Short-time objective intelligibility.
//!
//! The measure operates at 10 kHz: inputs at other rates are resampled by a
//! polyphase windowed-sinc converter. Frames the clean signal deems silent
//! (more than 40 dB below the loudest frame) are removed from both signals,
//! the rest is mapped onto 15 one-third-octave bands starting at 150 Hz, and
//! band envelopes are correlated over 384 ms segments after per-segment
//! normalization and distortion clipping.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use crate::dsp::hann_periodic;
use crate::error::{Error, Result};

const TARGET_FS: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEG_FRAMES: usize = 30;
const DYN_RANGE_DB: f64 = 40.0;
const BETA_DB: f64 = -15.0;
const EPS: f64 = 1e-15;

/// Intelligibility of `est` against the clean `reference`, in [-1, 1].
/// Inputs must be equally long and cover at least 384 ms of active signal.
pub fn stoi(est: &[f32], reference: &[f32], fs: u32) -> Result<f64> {
    if fs == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "length mismatch: est {} vs reference {}",
            est.len(),
            reference.len()
        )));
    }
    let x: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = est.iter().map(|&v| v as f64).collect();
    let x = resample(&x, fs, TARGET_FS);
    let y = resample(&y, fs, TARGET_FS);

    let (x, y) = remove_silent_frames(&x, &y);
    let xb = band_envelopes(&x);
    let yb = band_envelopes(&y);
    if xb.len() < SEG_FRAMES {
        return Err(Error::invalid(
            "input must cover at least 384 ms of active signal",
        ));
    }

    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for end in SEG_FRAMES..=xb.len() {
        let start = end - SEG_FRAMES;
        for band in 0..NUM_BANDS {
            let xs: Vec<f64> = (start..end).map(|t| xb[t][band]).collect();
            let ys: Vec<f64> = (start..end).map(|t| yb[t][band]).collect();
            let nx = l2(&xs);
            let ny = l2(&ys);
            let alpha = nx / (ny + EPS);
            let clipped: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(&yv, &xv)| (yv * alpha).min(xv * clip))
                .collect();
            sum += correlation(&xs, &clipped);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        dot += dx * dy;
        na += dx * dx;
        nb += dy * dy;
    }
    dot / (na.sqrt() * nb.sqrt() + EPS)
}

/// Drops frames whose clean-signal energy sits more than 40 dB below the
/// loudest frame, then rebuilds both signals from the surviving frames by
/// overlap-add.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann_periodic(FRAME);
    let starts: Vec<usize> = (0..)
        .map(|i| i * HOP)
        .take_while(|s| s + FRAME <= x.len())
        .collect();
    if starts.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|i| (w[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let loudest = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| e > loudest - DYN_RANGE_DB)
        .map(|(&s, _)| s)
        .collect();
    let out_len = (kept.len().max(1) - 1) * HOP + FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (slot, &s) in kept.iter().enumerate() {
        let base = slot * HOP;
        for i in 0..FRAME {
            xs[base + i] += w[i] * x[s + i];
            ys[base + i] += w[i] * y[s + i];
        }
    }
    (xs, ys)
}

/// One-third-octave band envelopes per frame: root energy of the 512-point
/// spectrum over each band's bin range.
fn band_envelopes(sig: &[f64]) -> Vec<[f64; NUM_BANDS]> {
    let bands = band_edges();
    let w = hann_periodic(FRAME);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let mut out = Vec::new();
    let mut s = 0usize;
    while s + FRAME <= sig.len() {
        let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
        for i in 0..FRAME {
            buf[i] = Complex64::new(w[i] * sig[s + i], 0.0);
        }
        fft.process(&mut buf);
        let mut row = [0.0f64; NUM_BANDS];
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            row[b] = buf[lo..hi].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        }
        out.push(row);
        s += HOP;
    }
    out
}

/// Band bin ranges `[lo, hi)` over the positive-frequency axis: nearest bins
/// to the third-octave edges around center frequencies `150 * 2^(k/3)`.
fn band_edges() -> [(usize, usize); NUM_BANDS] {
    let bin_hz = TARGET_FS as f64 / NFFT as f64;
    let nearest = |hz: f64| -> usize {
        let k = (hz / bin_hz).round() as usize;
        k.min(NFFT / 2)
    };
    let mut out = [(0usize, 0usize); NUM_BANDS];
    for (k, slot) in out.iter_mut().enumerate() {
        let cf = MIN_FREQ * 2f64.powf(k as f64 / 3.0);
        *slot = (nearest(cf * 2f64.powf(-1.0 / 6.0)), nearest(cf * 2f64.powf(1.0 / 6.0)));
    }
    out
}

/// Rational-rate polyphase resampler with a Blackman-windowed sinc kernel,
/// delay-compensated so `out[0]` lines up with `x[0]`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from, to);
    let up = (to / g) as i64;
    let down = (from / g) as i64;
    let lim = up.max(down);
    let half = (10 * lim) as i64;
    let taps = (2 * half + 1) as usize;
    let cutoff = 0.5 / lim as f64;
    let mut h = vec![0.0f64; taps];
    for (i, v) in h.iter_mut().enumerate() {
        let n = i as f64 - half as f64;
        let sinc = if n == 0.0 {
            2.0 * cutoff
        } else {
            (2.0 * PI * cutoff * n).sin() / (PI * n)
        };
        let ph = 2.0 * PI * i as f64 / (taps - 1) as f64;
        let win = 0.42 - 0.5 * ph.cos() + 0.08 * (2.0 * ph).cos();
        *v = sinc * win * up as f64;
    }
    let out_len = ((x.len() as i64 * up + down - 1) / down) as usize;
    let mut out = vec![0.0f64; out_len];
    for (m, o) in out.iter_mut().enumerate() {
        let t = m as i64 * down + half;
        // contributions x[n]*h[t - n*up] for taps inside the kernel support
        let n_lo = ((t - 2 * half) + up - 1).div_euclid(up).max(0);
        let n_hi = t.div_euclid(up).min(x.len() as i64 - 1);
        let mut acc = 0.0;
        for n in n_lo..=n_hi {
            acc += x[n as usize] * h[(t - n * up) as usize];
        }
        *o = acc;
    }
    out
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
