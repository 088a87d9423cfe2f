//! Deterministic synthetic sources standing in for recorded corpora.

use rand::Rng;

/// Speech-like test signal: a harmonic complex with a slowly gliding
/// fundamental, 1/k harmonic rolloff, and syllable-rate amplitude modulation.
/// Peak-normalized to 0.5.
pub fn synth_speech(seconds: f64, fs: u32, rng: &mut impl Rng) -> Vec<f32> {
    let n = (seconds * fs as f64).round() as usize;
    let fs_f = fs as f64;
    let f0 = rng.gen_range(110.0..240.0);
    let glide = rng.gen_range(-0.15..0.15); // relative f0 drift over the clip
    let am_rate = rng.gen_range(2.0..6.0);
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let n_harm = ((4000.0 / f0) as usize).clamp(3, 30);
    let phases: Vec<f64> =
        (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    let mut out = vec![0.0f64; n];
    let mut inst_phase = 0.0f64;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / fs_f;
        let f_now = f0 * (1.0 + glide * t / seconds.max(1e-9));
        inst_phase += std::f64::consts::TAU * f_now / fs_f;
        let mut s = 0.0;
        for (k, ph) in phases.iter().enumerate() {
            let h = (k + 1) as f64;
            if f_now * h > 0.45 * fs_f {
                break;
            }
            s += (inst_phase * h + ph).sin() / h;
        }
        let am = 0.55 + 0.45 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
        *o = s * am;
    }
    let peak = out.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
    out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    out.iter().map(|&v| v as f32).collect()
}

/// Wideband noise with a random one-pole lowpass tilt, peak-normalized to 0.5.
pub fn synth_noise(seconds: f64, fs: u32, rng: &mut impl Rng) -> Vec<f32> {
    let n = (seconds * fs as f64).round() as usize;
    let pole = rng.gen_range(0.0..0.9);
    let mut prev = 0.0f64;
    let mut out = vec![0.0f64; n];
    for o in out.iter_mut() {
        let white: f64 = rng.gen_range(-1.0..1.0);
        prev = pole * prev + (1.0 - pole) * white;
        *o = prev;
    }
    let peak = out.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
    out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    out.iter().map(|&v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sources_are_deterministic_and_bounded() {
        let a = synth_speech(1.0, 16000, &mut ChaCha8Rng::seed_from_u64(4));
        let b = synth_speech(1.0, 16000, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!(a.len(), 16000);
        let peak = a.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);

        let n = synth_noise(0.5, 16000, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(n.len(), 8000);
        assert!(n.iter().all(|v| v.abs() <= 0.5 + 1e-6));
    }

    #[test]
    fn speech_energy_is_modulated() {
        // syllable-rate AM means frame energies vary by well over 2x
        let x = synth_speech(2.0, 16000, &mut ChaCha8Rng::seed_from_u64(9));
        let frames: Vec<f64> = x
            .chunks(512)
            .map(|c| c.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .collect();
        let hi = frames.iter().cloned().fold(0.0f64, f64::max);
        let lo = frames.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi > 4.0 * lo.max(1e-12), "hi {} lo {}", hi, lo);
    }
}
