//! Offline enhancement: features, mask inference, and phase-aware
//! resynthesis against the reference channel.

use super::features;
use super::net::{forward_mask, Bind};
use super::params::ModelParams;
use crate::dsp::{self, DspConfig, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor};

/// Enhance a multichannel capture (channel 0 is the reference). Returns a
/// mono signal of exactly the input length.
pub fn enhance(channels: &[Vec<f32>], params: &ModelParams) -> Result<Vec<f32>> {
    let cfg = params.hyper.dsp;
    let cf = features::extract(channels, &cfg)?;
    let mask = infer_mask(&cf.feats, params)?;
    reconstruct_from_mask(&mask, &cf.specs[0], &cfg, channels[0].len())
}

/// Run the network on pre-extracted features and return the `[T, F]` mask.
pub fn infer_mask(feats: &[Tensor<f32>], params: &ModelParams) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let ids: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let mask = forward_mask(&mut tape, params, &ids, Bind::Constants)?;
    Ok(tape.val(mask).clone())
}

/// Apply a `[T, F]` mask to the reference spectrogram in the compressed
/// magnitude domain, then resynthesize: decompress, refine phase from the
/// noisy-phase initialization, and overlap-add back to `out_len` samples.
pub fn reconstruct_from_mask(
    mask: &Tensor<f32>,
    ref_spec: &Spectrogram,
    cfg: &DspConfig,
    out_len: usize,
) -> Result<Vec<f32>> {
    let (t_len, f_len) = (ref_spec.n_frames, ref_spec.n_bins);
    if mask.shape() != [t_len, f_len] {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match spectrogram [{}, {}]",
            mask.shape(),
            t_len,
            f_len
        )));
    }
    let n = t_len * f_len;
    let mut mag = vec![0.0f64; n];
    let mut phase = vec![0.0f64; n];
    let inv_p = 1.0 / cfg.compress_exp;
    let cm = dsp::compress_mag(ref_spec, cfg.compress_exp);
    for i in 0..n {
        let est = (mask.data()[i] as f64).max(0.0) * cm[i];
        mag[i] = est.powf(inv_p);
        phase[i] = ref_spec.data[i].arg();
    }
    let refined = dsp::griffin_lim(&mag, &phase, t_len, cfg.gla_iters, cfg)?;
    let full = dsp::istft_f64(&refined);
    if full.len() < out_len {
        return Err(Error::contract("synthesis shorter than requested output"));
    }
    Ok(full[..out_len].iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hyper;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn all_pass_mask_reproduces_the_input() {
        let cfg = DspConfig::default();
        let x = noise(8000, 1);
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let spec = dsp::stft_f64(&xf, &cfg).unwrap();
        let ones = Tensor::from_vec(
            &[spec.n_frames, spec.n_bins],
            vec![1.0f32; spec.n_frames * spec.n_bins],
        )
        .unwrap();
        let y = reconstruct_from_mask(&ones, &spec, &cfg, x.len()).unwrap();
        assert_eq!(y.len(), x.len());
        let peak = x.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        for i in cfg.win_len..x.len() - cfg.win_len {
            assert!(
                (y[i] - x[i]).abs() / peak < 1e-5,
                "sample {}: {} vs {}",
                i,
                y[i],
                x[i]
            );
        }
    }

    #[test]
    fn zero_mask_silences() {
        let cfg = DspConfig::default();
        let x = noise(4000, 2);
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let spec = dsp::stft_f64(&xf, &cfg).unwrap();
        let zeros = Tensor::zeros(&[spec.n_frames, spec.n_bins]);
        let y = reconstruct_from_mask(&zeros, &spec, &cfg, x.len()).unwrap();
        assert!(y.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn enhance_runs_end_to_end() {
        let params = ModelParams::init(Hyper::toy(), 9).unwrap();
        let chans: Vec<Vec<f32>> = (0..2).map(|i| noise(3000, 10 + i)).collect();
        let y = enhance(&chans, &params).unwrap();
        assert_eq!(y.len(), 3000);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn enhance_rejects_length_mismatch() {
        let params = ModelParams::init(Hyper::toy(), 9).unwrap();
        let chans = vec![noise(3000, 1), noise(2999, 2)];
        assert!(enhance(&chans, &params).is_err());
    }
}
