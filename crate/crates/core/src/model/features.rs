//! Input features: per channel, a `[3, T, F]` stack of the power-compressed
//! magnitude and the wrapped time/frequency phase differences, all on one
//! shared frame grid anchored to the reference channel's length.

use crate::dsp::{self, DspConfig, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub struct ChannelFeatures {
    /// Complex spectra, one per channel; index 0 is the reference.
    pub specs: Vec<Spectrogram>,
    /// `[3, T, F]` feature stacks matching `specs`.
    pub feats: Vec<Tensor<f32>>,
    pub n_frames: usize,
}

pub fn extract(channels: &[Vec<f32>], cfg: &DspConfig) -> Result<ChannelFeatures> {
    cfg.validate()?;
    if channels.is_empty() {
        return Err(Error::invalid("need at least one channel"));
    }
    let len = channels[0].len();
    if len == 0 {
        return Err(Error::invalid("empty signal"));
    }
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("channels must share one length"));
    }
    let n_frames = dsp::frame_count(len, cfg);
    let n_bins = cfg.n_bins();
    let mut specs = Vec::with_capacity(channels.len());
    let mut feats = Vec::with_capacity(channels.len());
    for ch in channels {
        let xf: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
        let spec = dsp::stft_frames(&xf, n_frames, cfg);
        let t = feature_stack(&spec, cfg);
        debug_assert_eq!(t.shape(), &[3, n_frames, n_bins]);
        specs.push(spec);
        feats.push(t);
    }
    Ok(ChannelFeatures { specs, feats, n_frames })
}

/// One channel's `[3, T, F]` stack from its spectrogram.
pub fn feature_stack(spec: &Spectrogram, cfg: &DspConfig) -> Tensor<f32> {
    let (t_len, f_len) = (spec.n_frames, spec.n_bins);
    let pd = dsp::phase_features(spec).expect("spectrogram has at least one frame");
    let cm = dsp::compress_mag(spec, cfg.compress_exp);
    let plane = t_len * f_len;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        data[i] = cm[i] as f32;
        data[plane + i] = pd.pd_time[i] as f32;
        data[2 * plane + i] = pd.pd_freq[i] as f32;
    }
    Tensor::from_vec(&[3, t_len, f_len], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn shapes_and_grid_are_shared() {
        let cfg = DspConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let chans: Vec<Vec<f32>> =
            (0..3).map(|_| (0..4000).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
        let cf = extract(&chans, &cfg).unwrap();
        assert_eq!(cf.n_frames, dsp::frame_count(4000, &cfg));
        for (s, f) in cf.specs.iter().zip(&cf.feats) {
            assert_eq!(s.n_frames, cf.n_frames);
            assert_eq!(f.shape(), &[3, cf.n_frames, 257]);
            assert!(f.all_finite());
        }
    }

    #[test]
    fn magnitude_plane_is_compressed_magnitude() {
        let cfg = DspConfig::default();
        let x: Vec<f32> = (0..2000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
        let cf = extract(&[x], &cfg).unwrap();
        let spec = &cf.specs[0];
        let feats = &cf.feats[0];
        let f_len = spec.n_bins;
        for t in 0..spec.n_frames {
            for f in (0..f_len).step_by(41) {
                let want = spec.at(t, f).norm().powf(cfg.compress_exp) as f32;
                let got = feats.data()[t * f_len + f];
                assert!((want - got).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let cfg = DspConfig::default();
        let a = vec![0.1f32; 1000];
        let b = vec![0.1f32; 999];
        assert!(extract(&[a, b], &cfg).is_err());
    }
}
