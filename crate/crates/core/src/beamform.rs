//! Reference beamformers driven by ground-truth statistics.
//!
//! Channel 0 is the reference everywhere. Both beamformers accept any channel
//! count and are unaffected by reordering the non-reference channels, provided
//! their statistics are permuted the same way.

use num_complex::Complex64;

use crate::dsp::{istft, stft, DspConfig, Spectrogram};
use crate::error::{Error, Result};
use crate::sim::MultichannelRecording;

/// Per-frequency spatial covariance matrices, row-major `C x C` per bin.
/// Hermitian by construction; the noise matrix carries diagonal loading of
/// `1e-6 * trace / C` so the beamforming solve stays well posed.
#[derive(Debug, Clone)]
pub struct OracleStats {
    pub n_channels: usize,
    pub n_bins: usize,
    pub r_y: Vec<Vec<Complex64>>,
    pub r_n: Vec<Vec<Complex64>>,
}

/// Time-averaged outer products of the per-channel spectra of the clean and
/// noise parts of `rec`. Covariances are estimated over the whole utterance.
pub fn oracle_stats(rec: &MultichannelRecording, cfg: &DspConfig) -> Result<OracleStats> {
    cfg.validate()?;
    let c = rec.reverberant_clean.len();
    if c == 0 || rec.noise_sum.len() != c {
        return Err(Error::invalid("recording must carry matching clean and noise channels"));
    }
    let clean: Vec<Spectrogram> =
        rec.reverberant_clean.iter().map(|w| stft(w, cfg)).collect::<Result<_>>()?;
    let noise: Vec<Spectrogram> =
        rec.noise_sum.iter().map(|w| stft(w, cfg)).collect::<Result<_>>()?;
    let r_y = covariances(&clean)?;
    let mut r_n = covariances(&noise)?;
    for mat in &mut r_n {
        let trace: f64 = (0..c).map(|i| mat[i * c + i].re).sum();
        let load = 1e-6 * trace / c as f64;
        for i in 0..c {
            mat[i * c + i] += load;
        }
    }
    Ok(OracleStats { n_channels: c, n_bins: clean[0].n_bins, r_y, r_n })
}

fn covariances(specs: &[Spectrogram]) -> Result<Vec<Vec<Complex64>>> {
    let c = specs.len();
    let (n_frames, n_bins) = (specs[0].n_frames, specs[0].n_bins);
    if specs.iter().any(|s| s.n_frames != n_frames || s.n_bins != n_bins) {
        return Err(Error::contract("channels disagree on spectrogram shape"));
    }
    let mut out = vec![vec![Complex64::new(0.0, 0.0); c * c]; n_bins];
    for t in 0..n_frames {
        for (f, mat) in out.iter_mut().enumerate() {
            for i in 0..c {
                let xi = specs[i].at(t, f);
                for j in i..c {
                    mat[i * c + j] += xi * specs[j].at(t, f).conj();
                }
            }
        }
    }
    // Mirror the strict upper triangle so Hermitian symmetry is exact.
    let scale = 1.0 / n_frames.max(1) as f64;
    for mat in &mut out {
        for i in 0..c {
            for j in 0..i {
                mat[i * c + j] = mat[j * c + i].conj();
            }
        }
        for v in mat.iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Per-frequency beamforming solution. `w` is applied as `wᴴx`; `d` is the
/// steering vector it is distortionless toward.
#[derive(Debug, Clone)]
pub struct MvdrWeights {
    pub n_channels: usize,
    pub w: Vec<Vec<Complex64>>,
    pub d: Vec<Vec<Complex64>>,
}

/// Minimum-variance distortionless-response weights: steer along the dominant
/// eigenvector of the speech covariance, minimize noise power subject to unit
/// gain in that direction. `wᴴd = 1` holds at every frequency by construction.
pub fn mvdr_weights(stats: &OracleStats) -> Result<MvdrWeights> {
    let c = stats.n_channels;
    if c == 0 || stats.r_y.len() != stats.n_bins || stats.r_n.len() != stats.n_bins {
        return Err(Error::contract("statistics shape is inconsistent"));
    }
    let mut w = Vec::with_capacity(stats.n_bins);
    let mut d = Vec::with_capacity(stats.n_bins);
    for f in 0..stats.n_bins {
        let steer = principal_eigenvector(&stats.r_y[f], c);
        let sol = solve(&stats.r_n[f], &steer, c).ok_or_else(|| {
            Error::Numerical(format!("noise covariance is singular at frequency bin {f}"))
        })?;
        let den: Complex64 = steer.iter().zip(&sol).map(|(di, si)| di.conj() * si).sum();
        if !den.is_finite() || den.norm() < 1e-300 {
            return Err(Error::Numerical(format!(
                "beamformer normalization failed at frequency bin {f}"
            )));
        }
        w.push(sol.into_iter().map(|s| s / den).collect());
        d.push(steer);
    }
    Ok(MvdrWeights { n_channels: c, w, d })
}

/// Applies the oracle beamformer to a noisy multichannel spectrum and
/// resynthesizes a mono wave.
pub fn mvdr(noisy: &[Spectrogram], stats: &OracleStats) -> Result<Vec<f32>> {
    if noisy.is_empty() || noisy.len() != stats.n_channels {
        return Err(Error::contract(format!(
            "got {} channels of spectra for {}-channel statistics",
            noisy.len(),
            stats.n_channels
        )));
    }
    let (n_frames, n_bins) = (noisy[0].n_frames, noisy[0].n_bins);
    if n_bins != stats.n_bins
        || noisy.iter().any(|s| s.n_frames != n_frames || s.n_bins != n_bins)
    {
        return Err(Error::contract("spectrogram shapes disagree with the statistics"));
    }
    let ws = mvdr_weights(stats)?;
    let mut out = Spectrogram::zeros(noisy[0].cfg, n_frames);
    for t in 0..n_frames {
        for f in 0..n_bins {
            let mut acc = Complex64::new(0.0, 0.0);
            for (ch, wc) in ws.w[f].iter().enumerate() {
                acc += wc.conj() * noisy[ch].at(t, f);
            }
            *out.at_mut(t, f) = acc;
        }
    }
    Ok(istft(&out))
}

/// Runs the oracle beamformer end to end on a simulated recording; the output
/// is trimmed or zero-padded to the input length.
pub fn oracle_mvdr(rec: &MultichannelRecording, cfg: &DspConfig) -> Result<Vec<f32>> {
    let stats = oracle_stats(rec, cfg)?;
    let specs: Vec<Spectrogram> = rec.noisy.iter().map(|w| stft(w, cfg)).collect::<Result<_>>()?;
    let mut out = mvdr(&specs, &stats)?;
    out.resize(rec.noisy[0].len(), 0.0);
    Ok(out)
}

/// Integer-delay alignment to the reference followed by a uniform average.
/// `tdoas[c]` is the arrival delay of channel `c` relative to channel 0 in
/// samples; samples shifted in from beyond either end count as zero.
pub fn delay_and_sum(waves: &[Vec<f32>], tdoas: &[i64]) -> Result<Vec<f32>> {
    if waves.is_empty() || waves.len() != tdoas.len() {
        return Err(Error::invalid(format!(
            "got {} waves and {} delays",
            waves.len(),
            tdoas.len()
        )));
    }
    let len = waves[0].len();
    let mut acc = vec![0.0f64; len];
    for (wave, &tau) in waves.iter().zip(tdoas) {
        for (n, slot) in acc.iter_mut().enumerate() {
            let m = n as i64 + tau;
            if m >= 0 && (m as usize) < wave.len() {
                *slot += wave[m as usize] as f64;
            }
        }
    }
    let c = waves.len() as f64;
    Ok(acc.into_iter().map(|v| (v / c) as f32).collect())
}

/// Dominant eigenvector by power iteration, for Hermitian positive
/// semidefinite input. The phase is fixed so the reference entry is real and
/// nonnegative. Starting from the reference column keeps the iteration
/// equivariant under non-reference channel permutations.
fn principal_eigenvector(mat: &[Complex64], c: usize) -> Vec<Complex64> {
    let col = |k: usize| -> Vec<Complex64> { (0..c).map(|i| mat[i * c + k]).collect() };
    let mut v = col(0);
    if vec_norm(&v) < 1e-300 {
        let best = (0..c)
            .max_by(|&a, &b| vec_norm(&col(a)).total_cmp(&vec_norm(&col(b))))
            .unwrap();
        v = col(best);
    }
    let n0 = vec_norm(&v);
    if n0 < 1e-300 {
        let mut e = vec![Complex64::new(0.0, 0.0); c];
        e[0] = Complex64::new(1.0, 0.0);
        return e;
    }
    for z in v.iter_mut() {
        *z /= n0;
    }
    for _ in 0..500 {
        let mut u = mat_vec(mat, &v, c);
        let n = vec_norm(&u);
        if n < 1e-300 {
            break;
        }
        for z in u.iter_mut() {
            *z /= n;
        }
        let step = u.iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        v = u;
        if step < 1e-15 {
            break;
        }
    }
    let a = v[0];
    if a.norm() > 1e-12 {
        let ph = a.conj() / a.norm();
        for z in v.iter_mut() {
            *z *= ph;
        }
    }
    v
}

fn mat_vec(mat: &[Complex64], v: &[Complex64], c: usize) -> Vec<Complex64> {
    (0..c)
        .map(|i| (0..c).map(|j| mat[i * c + j] * v[j]).sum())
        .collect()
}

fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting. Returns
/// `None` when a pivot collapses relative to the matrix scale.
fn solve(a: &[Complex64], b: &[Complex64], c: usize) -> Option<Vec<Complex64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if scale <= 0.0 {
        return None;
    }
    let tiny = scale * 1e-14;
    for k in 0..c {
        let p = (k..c)
            .max_by(|&r, &s| m[r * c + k].norm().total_cmp(&m[s * c + k].norm()))
            .unwrap();
        if m[p * c + k].norm() < tiny {
            return None;
        }
        if p != k {
            for j in 0..c {
                m.swap(p * c + j, k * c + j);
            }
            x.swap(p, k);
        }
        let piv = m[k * c + k];
        for r in k + 1..c {
            let f = m[r * c + k] / piv;
            if f.norm() == 0.0 {
                continue;
            }
            for j in k..c {
                let v = m[k * c + j];
                m[r * c + j] -= f * v;
            }
            let xk = x[k];
            x[r] -= f * xk;
        }
    }
    for k in (0..c).rev() {
        let mut s = x[k];
        for j in k + 1..c {
            s -= m[k * c + j] * x[j];
        }
        x[k] = s / m[k * c + k];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synth_noise, synth_speech, RoomSpec, Scene};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dummy_scene(c: usize) -> Scene {
        Scene {
            room: RoomSpec::new(6.0, 5.0, 3.0, 0.3),
            source_pos: [2.0, 2.0, 1.5],
            mic_pos: (0..c).map(|i| [3.0 + 0.1 * i as f64, 2.5, 1.2]).collect(),
            noise_pos: vec![[4.0, 4.0, 1.5]],
            snr_db: 0.0,
            seed: 0,
        }
    }

    fn white(len: usize, rng: &mut StdRng) -> Vec<f32> {
        (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    /// Zero-padded integer shift: positive `tau` delays the signal.
    fn shifted(x: &[f32], tau: i64) -> Vec<f32> {
        (0..x.len() as i64)
            .map(|n| {
                let m = n - tau;
                if m >= 0 && (m as usize) < x.len() {
                    x[m as usize]
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn rec_from(
        clean: Vec<Vec<f32>>,
        noise: Vec<Vec<f32>>,
    ) -> MultichannelRecording {
        let c = clean.len();
        let noisy = clean
            .iter()
            .zip(&noise)
            .map(|(y, n)| y.iter().zip(n).map(|(a, b)| a + b).collect())
            .collect();
        MultichannelRecording {
            sample_rate: 16000,
            noisy,
            reverberant_clean: clean,
            noise_sum: noise,
            rirs: Vec::new(),
            scene: dummy_scene(c),
        }
    }

    fn power(x: &[f32]) -> f64 {
        x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64
    }

    fn db(p: f64) -> f64 {
        10.0 * p.log10()
    }

    #[test]
    fn white_noise_covariance_is_nearly_diagonal() {
        let mut rng = StdRng::seed_from_u64(11);
        let len = 8 * 16000;
        let rec = rec_from(
            vec![white(len, &mut rng), white(len, &mut rng)],
            vec![white(len, &mut rng), white(len, &mut rng)],
        );
        let stats = oracle_stats(&rec, &DspConfig::default()).unwrap();
        let mut ratio = 0.0;
        let mut count = 0usize;
        for f in 1..stats.n_bins - 1 {
            let m = &stats.r_n[f];
            let diag = 0.5 * (m[0].re + m[3].re);
            assert!(diag > 0.0);
            ratio += m[1].norm() / diag;
            count += 1;
        }
        let mean = ratio / count as f64;
        assert!(mean < 0.15, "mean off-diagonal ratio {mean}");
    }

    #[test]
    fn duplicated_channels_give_a_rank_one_speech_covariance() {
        let mut rng = StdRng::seed_from_u64(3);
        let s = synth_speech(1.0, 16000, &mut rng);
        let n = synth_noise(1.0, 16000, &mut rng);
        let rec = rec_from(vec![s; 3], vec![n; 3]);
        let stats = oracle_stats(&rec, &DspConfig::default()).unwrap();
        for mat in &stats.r_y {
            let base = mat[0];
            for e in mat {
                assert!(
                    (e - base).norm() <= 1e-12 * base.norm().max(1e-30),
                    "entries differ: {e} vs {base}"
                );
            }
        }
    }

    #[test]
    fn covariances_are_hermitian() {
        let mut rng = StdRng::seed_from_u64(5);
        let len = 16000;
        let clean: Vec<Vec<f32>> = (0..3).map(|_| synth_speech(1.0, 16000, &mut rng)).collect();
        let noise: Vec<Vec<f32>> = (0..3).map(|_| white(len, &mut rng)).collect();
        let stats = oracle_stats(&rec_from(clean, noise), &DspConfig::default()).unwrap();
        for mats in [&stats.r_y, &stats.r_n] {
            for mat in mats.iter() {
                for i in 0..3 {
                    for j in 0..3 {
                        let diff = (mat[i * 3 + j] - mat[j * 3 + i].conj()).norm();
                        assert!(diff < 1e-6, "asymmetry {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_channel_beamformer_passes_the_reference_through() {
        let mut rng = StdRng::seed_from_u64(7);
        let s = synth_speech(1.0, 16000, &mut rng);
        let n = synth_noise(1.0, 16000, &mut rng);
        let rec = rec_from(vec![s], vec![n]);
        let cfg = DspConfig::default();
        let out = oracle_mvdr(&rec, &cfg).unwrap();
        let x = &rec.noisy[0];
        assert_eq!(out.len(), x.len());
        let lo = cfg.win_len;
        let hi = x.len() - cfg.win_len;
        let err: f64 = (lo..hi).map(|i| ((out[i] - x[i]) as f64).powi(2)).sum::<f64>().sqrt();
        let denom: f64 = (lo..hi).map(|i| (x[i] as f64).powi(2)).sum::<f64>().sqrt();
        assert!(err / denom < 1e-6, "pass-through error {}", err / denom);
    }

    #[test]
    fn distortionless_constraint_holds_at_every_frequency() {
        let mut rng = StdRng::seed_from_u64(13);
        let s = synth_speech(1.0, 16000, &mut rng);
        let taus = [0i64, 4, -3, 9];
        let clean: Vec<Vec<f32>> = taus.iter().map(|&t| shifted(&s, t)).collect();
        let noise: Vec<Vec<f32>> = (0..4).map(|_| white(s.len(), &mut rng)).collect();
        let stats = oracle_stats(&rec_from(clean, noise), &DspConfig::default()).unwrap();
        let ws = mvdr_weights(&stats).unwrap();
        for f in 0..stats.n_bins {
            let g: Complex64 = ws.w[f]
                .iter()
                .zip(&ws.d[f])
                .map(|(wi, di)| wi.conj() * di)
                .sum();
            let dev = (g - Complex64::new(1.0, 0.0)).norm();
            assert!(dev < 1e-6, "bin {f}: |w^H d - 1| = {dev}");
        }
    }

    #[test]
    fn anechoic_array_gain_is_nonnegative() {
        let mut rng = StdRng::seed_from_u64(17);
        let s = synth_speech(2.0, 16000, &mut rng);
        let clean = vec![s.clone(), shifted(&s, 7)];
        let p_ref = power(&clean[0]);
        let noise: Vec<Vec<f32>> = (0..2)
            .map(|_| {
                let w = white(s.len(), &mut rng);
                let g = (p_ref / power(&w)).sqrt() as f32;
                w.into_iter().map(|v| v * g).collect()
            })
            .collect();
        let cfg = DspConfig::default();
        let rec = rec_from(clean, noise);
        let stats = oracle_stats(&rec, &cfg).unwrap();
        let spec =
            |chs: &[Vec<f32>]| -> Vec<Spectrogram> { chs.iter().map(|w| stft(w, &cfg).unwrap()).collect() };
        let y_out = mvdr(&spec(&rec.reverberant_clean), &stats).unwrap();
        let n_out = mvdr(&spec(&rec.noise_sum), &stats).unwrap();
        let snr_in = db(power(&rec.reverberant_clean[0]) / power(&rec.noise_sum[0]));
        let snr_out = db(power(&y_out) / power(&n_out));
        assert!(
            snr_out >= snr_in - 0.01,
            "array gain {} dB",
            snr_out - snr_in
        );
    }

    #[test]
    fn permuting_non_reference_channels_leaves_mvdr_unchanged() {
        let mut rng = StdRng::seed_from_u64(23);
        let s = synth_speech(1.0, 16000, &mut rng);
        let taus = [0i64, 5, -4, 11];
        let clean: Vec<Vec<f32>> = taus.iter().map(|&t| shifted(&s, t)).collect();
        let noise: Vec<Vec<f32>> = (0..4).map(|_| white(s.len(), &mut rng)).collect();
        let rec = rec_from(clean, noise);
        let cfg = DspConfig::default();
        let base = oracle_mvdr(&rec, &cfg).unwrap();

        let perm = [0usize, 3, 1, 2];
        let pick = |chs: &[Vec<f32>]| -> Vec<Vec<f32>> {
            perm.iter().map(|&i| chs[i].clone()).collect()
        };
        let mut shuffled = rec_from(pick(&rec.reverberant_clean), pick(&rec.noise_sum));
        shuffled.noisy = pick(&rec.noisy);
        let out = oracle_mvdr(&shuffled, &cfg).unwrap();

        let worst = base
            .iter()
            .zip(&out)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "permutation moved output by {worst}");
    }

    #[test]
    fn silent_noise_reports_the_failing_frequency() {
        let mut rng = StdRng::seed_from_u64(29);
        let s = synth_speech(1.0, 16000, &mut rng);
        let len = s.len();
        let rec = rec_from(vec![s; 2], vec![vec![0.0; len]; 2]);
        let cfg = DspConfig::default();
        let err = oracle_mvdr(&rec, &cfg).unwrap_err();
        match err {
            Error::Numerical(msg) => assert!(msg.contains("bin"), "message: {msg}"),
            other => panic!("expected a numerical failure, got {other}"),
        }
    }

    #[test]
    fn single_channel_delay_and_sum_is_identity() {
        let mut rng = StdRng::seed_from_u64(31);
        let x = white(4000, &mut rng);
        let out = delay_and_sum(&[x.clone()], &[0]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn aligned_identical_channels_average_to_the_input() {
        let mut rng = StdRng::seed_from_u64(37);
        let x = white(4000, &mut rng);
        let out = delay_and_sum(&[x.clone(), x.clone(), x.clone()], &[0, 0, 0]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn four_mic_alignment_gain_matches_theory() {
        let mut rng = StdRng::seed_from_u64(41);
        let s = synth_speech(2.0, 16000, &mut rng);
        let taus = [0i64, 3, -2, 5];
        let speech: Vec<Vec<f32>> = taus.iter().map(|&t| shifted(&s, t)).collect();
        let p_ref = power(&speech[0]);
        let noise: Vec<Vec<f32>> = (0..4)
            .map(|_| {
                let w = white(s.len(), &mut rng);
                let g = (p_ref / power(&w)).sqrt() as f32;
                w.into_iter().map(|v| v * g).collect()
            })
            .collect();
        let s_out = delay_and_sum(&speech, &taus).unwrap();
        let n_out = delay_and_sum(&noise, &taus).unwrap();
        let margin = 16;
        let trim = |x: &[f32]| x[margin..x.len() - margin].to_vec();
        let gain = db(power(&trim(&s_out)) / power(&trim(&n_out)))
            - db(power(&trim(&speech[0])) / power(&trim(&noise[0])));
        let want = 10.0 * 4.0f64.log10();
        assert!((gain - want).abs() < 1.0, "gain {gain} dB, expected near {want}");
    }

    #[test]
    fn permuting_non_reference_channels_leaves_delay_and_sum_unchanged() {
        let mut rng = StdRng::seed_from_u64(43);
        let s = synth_speech(1.0, 16000, &mut rng);
        let taus = [0i64, 3, -2, 5];
        let waves: Vec<Vec<f32>> = taus
            .iter()
            .map(|&t| {
                let mut x = shifted(&s, t);
                let n = white(s.len(), &mut rng);
                for (a, b) in x.iter_mut().zip(n) {
                    *a += 0.3 * b;
                }
                x
            })
            .collect();
        let base = delay_and_sum(&waves, &taus).unwrap();
        let perm = [0usize, 2, 3, 1];
        let pw: Vec<Vec<f32>> = perm.iter().map(|&i| waves[i].clone()).collect();
        let pt: Vec<i64> = perm.iter().map(|&i| taus[i]).collect();
        let out = delay_and_sum(&pw, &pt).unwrap();
        let worst = base
            .iter()
            .zip(&out)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "permutation moved output by {worst}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let waves = vec![vec![0.0f32; 100], vec![0.0f32; 100]];
        assert!(delay_and_sum(&waves, &[0]).is_err());
        assert!(delay_and_sum(&[], &[]).is_err());

        let mut rng = StdRng::seed_from_u64(47);
        let s = synth_speech(0.5, 16000, &mut rng);
        let n = white(s.len(), &mut rng);
        let rec = rec_from(vec![s], vec![n]);
        let cfg = DspConfig::default();
        let stats = oracle_stats(&rec, &cfg).unwrap();
        let two = vec![
            stft(&rec.noisy[0], &cfg).unwrap(),
            stft(&rec.noisy[0], &cfg).unwrap(),
        ];
        assert!(mvdr(&two, &stats).is_err());

        let empty = MultichannelRecording {
            sample_rate: 16000,
            noisy: Vec::new(),
            reverberant_clean: Vec::new(),
            noise_sum: Vec::new(),
            rirs: Vec::new(),
            scene: dummy_scene(0),
        };
        assert!(oracle_stats(&empty, &cfg).is_err());
    }
}
