//! Reverberant mixing at an exact reference-channel SNR.

use super::{rir::simulate_rir, MultichannelRecording, Scene};
use crate::error::{Error, Result};
use num_complex::Complex64;
use rustfft::FftPlanner;

/// Full linear convolution via FFT, in 64-bit arithmetic.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|z| z.re * scale).collect()
}

/// Tile or truncate `wave` to exactly `len` samples.
fn fit_length(wave: &[f32], len: usize) -> Vec<f64> {
    (0..len).map(|i| wave[i % wave.len()] as f64).collect()
}

/// Convolve the dry source and each noise with their image-method impulse
/// responses, then scale the summed noise so the reference channel hits the
/// scene's SNR exactly. The returned decomposition is bit-exact:
/// `noisy = reverberant_clean + noise_sum` sample for sample in f32.
pub fn mix_scene(
    clean: &[f32],
    noises: &[Vec<f32>],
    scene: &Scene,
    fs: u32,
) -> Result<MultichannelRecording> {
    scene.validate()?;
    if clean.is_empty() || clean.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("clean source is silent"));
    }
    if noises.len() != scene.noise_pos.len() {
        return Err(Error::invalid(format!(
            "scene has {} noise positions but {} noise waves were supplied",
            scene.noise_pos.len(),
            noises.len()
        )));
    }
    if noises.iter().any(|n| n.is_empty()) {
        return Err(Error::invalid("noise waves must be non-empty"));
    }
    let n_mics = scene.n_mics();
    let clean64: Vec<f64> = clean.iter().map(|&v| v as f64).collect();
    let noise64: Vec<Vec<f64>> = noises.iter().map(|n| fit_length(n, clean.len())).collect();

    let src_rirs: Vec<Vec<f64>> = scene
        .mic_pos
        .iter()
        .map(|&m| simulate_rir(&scene.room, scene.source_pos, m, fs))
        .collect::<Result<_>>()?;
    let noise_rirs: Vec<Vec<Vec<f64>>> = scene
        .noise_pos
        .iter()
        .map(|&np| {
            scene
                .mic_pos
                .iter()
                .map(|&m| simulate_rir(&scene.room, np, m, fs))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let max_rir = src_rirs
        .iter()
        .chain(noise_rirs.iter().flatten())
        .map(|h| h.len())
        .max()
        .unwrap();
    let out_len = clean.len() + max_rir - 1;

    let pad = |mut v: Vec<f64>| {
        v.resize(out_len, 0.0);
        v
    };
    let y64: Vec<Vec<f64>> =
        src_rirs.iter().map(|h| pad(convolve(&clean64, h))).collect();
    let mut n64 = vec![vec![0.0f64; out_len]; n_mics];
    for (k, nw) in noise64.iter().enumerate() {
        for (c, acc) in n64.iter_mut().enumerate() {
            let conv = convolve(nw, &noise_rirs[k][c]);
            for (a, v) in acc.iter_mut().zip(conv) {
                *a += v;
            }
        }
    }

    let energy = |x: &[f64]| x.iter().map(|&v| v * v).sum::<f64>();
    let ey = energy(&y64[0]);
    let en = energy(&n64[0]);
    // silent noise is the zero-amplitude limit: the mixture is the clean part
    let gain = if en > 0.0 { (ey / (en * 10f64.powf(scene.snr_db / 10.0))).sqrt() } else { 0.0 };

    let reverberant_clean: Vec<Vec<f32>> =
        y64.iter().map(|ch| ch.iter().map(|&v| v as f32).collect()).collect();
    let noise_sum: Vec<Vec<f32>> =
        n64.iter().map(|ch| ch.iter().map(|&v| (gain * v) as f32).collect()).collect();
    let noisy: Vec<Vec<f32>> = reverberant_clean
        .iter()
        .zip(&noise_sum)
        .map(|(y, n)| y.iter().zip(n).map(|(&a, &b)| a + b).collect())
        .collect();

    Ok(MultichannelRecording {
        sample_rate: fs,
        noisy,
        reverberant_clean,
        noise_sum,
        rirs: src_rirs,
        scene: scene.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{sample_scene, synth_noise, synth_speech, SceneConstraints};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_constraints(mics: usize) -> SceneConstraints {
        SceneConstraints { mics, t60_range: [0.15, 0.25], ..SceneConstraints::default() }
    }

    fn make_inputs(scene: &Scene, seed: u64) -> (Vec<f32>, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = synth_speech(1.0, 16000, &mut rng);
        let noises =
            scene.noise_pos.iter().map(|_| synth_noise(1.0, 16000, &mut rng)).collect();
        (clean, noises)
    }

    #[test]
    fn convolution_matches_the_direct_sum() {
        let a = [1.0, -0.5, 0.25, 0.0, 2.0];
        let b = [0.5, 1.0, -1.0];
        let got = convolve(&a, &b);
        let mut want = vec![0.0f64; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                want[i + j] += x * y;
            }
        }
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn reference_channel_snr_is_exact() {
        let scene = sample_scene(42, &quick_constraints(4)).unwrap();
        let (clean, noises) = make_inputs(&scene, 1);
        let rec = mix_scene(&clean, &noises, &scene, 16000).unwrap();
        let e = |x: &[f32]| x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        let got = 10.0 * (e(&rec.reverberant_clean[0]) / e(&rec.noise_sum[0])).log10();
        assert!((got - scene.snr_db).abs() < 0.01, "snr {} wanted {}", got, scene.snr_db);
    }

    #[test]
    fn decomposition_is_bit_exact_on_every_channel() {
        let scene = sample_scene(7, &quick_constraints(3)).unwrap();
        let (clean, noises) = make_inputs(&scene, 2);
        let rec = mix_scene(&clean, &noises, &scene, 16000).unwrap();
        assert_eq!(rec.n_channels(), 3);
        for c in 0..rec.n_channels() {
            assert_eq!(rec.noisy[c].len(), rec.len());
            for i in 0..rec.len() {
                assert_eq!(
                    rec.noisy[c][i],
                    rec.reverberant_clean[c][i] + rec.noise_sum[c][i],
                    "channel {} sample {}",
                    c,
                    i
                );
            }
        }
    }

    #[test]
    fn silent_noise_is_the_zero_amplitude_limit() {
        let scene = sample_scene(12, &quick_constraints(2)).unwrap();
        let (clean, mut noises) = make_inputs(&scene, 3);
        for n in &mut noises {
            n.iter_mut().for_each(|v| *v = 0.0);
        }
        let rec = mix_scene(&clean, &noises, &scene, 16000).unwrap();
        for c in 0..rec.n_channels() {
            assert!(rec.noise_sum[c].iter().all(|&v| v == 0.0));
            assert_eq!(rec.noisy[c], rec.reverberant_clean[c]);
        }
    }

    #[test]
    fn rejects_silent_clean_and_count_mismatch() {
        let scene = sample_scene(5, &quick_constraints(2)).unwrap();
        let (clean, noises) = make_inputs(&scene, 4);
        assert!(mix_scene(&vec![0.0; 16000], &noises, &scene, 16000).is_err());
        let wrong = vec![noises[0].clone(); scene.noise_pos.len() + 1];
        assert!(mix_scene(&clean, &wrong, &scene, 16000).is_err());
    }
}
