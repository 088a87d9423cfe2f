//! Central-difference validation of the reverse-mode gradients.
//!
//! The harness replays a loss builder at perturbed 64-bit parameter points,
//! so the f32 weight store never quantizes the probe. Structurally-zero
//! gradients (the attention key bias cancels in the softmax) make a pure
//! relative error blow up on rounding dust, hence the absolute floor in the
//! denominator.

use super::loss::{loss_grids, spectral_loss, LossGrids};
use crate::dsp;
use crate::error::Result;
use crate::model::net::Bind;
use crate::model::{features, forward_mask_with, Hyper, ModelParams};
use crate::nn::{Tape, Tensor, ValueId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const ABS_FLOOR: f64 = 1e-6;

/// How many entries per tensor the checker probes.
pub const PROBES_PER_TENSOR: usize = 20;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_rel: f64,
    pub mean_rel: f64,
    /// Tensor name and flat index where the worst error sat.
    pub worst_at: String,
    pub probes: usize,
}

/// Compare reverse-mode gradients against central differences for a loss
/// built by `builder`. The builder must register every tensor in `base` it
/// uses via the bind it is handed; unused tensors legitimately carry zero
/// gradient. Probes `per_tensor` random entries of each tensor (all of them
/// for small tensors).
pub fn fd_check<F>(
    builder: F,
    base: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<String, Tensor<f64>>, Bind) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = builder(&mut tape, base, Bind::Params)?;
    let analytic = tape.backward(loss);
    drop(tape);

    let eval = |map: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = builder(&mut tape, map, Bind::Constants)?;
        Ok(tape.val(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = base.clone();
    let mut worst_rel = 0.0f64;
    let mut rel_sum = 0.0f64;
    let mut worst_at = String::from("-");
    let mut probes = 0usize;
    for (name, t) in base {
        let n = t.numel();
        let idxs: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        };
        let zeros = Tensor::zeros(t.shape());
        let g = analytic.get(name).unwrap_or(&zeros);
        for i in idxs {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let hi = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let lo = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(ABS_FLOOR);
            probes += 1;
            rel_sum += rel;
            if rel > worst_rel {
                worst_rel = rel;
                worst_at = format!("{name}[{i}]");
            }
        }
    }
    let mean_rel = if probes > 0 { rel_sum / probes as f64 } else { 0.0 };
    Ok(GradCheckReport { worst_rel, mean_rel, worst_at, probes })
}

/// End-to-end check of the mask network and spectral loss on a tiny
/// two-channel input. 64-bit throughout.
pub fn grad_check(hyper: &Hyper, eps: f64, seed: u64) -> Result<GradCheckReport> {
    hyper.validate()?;
    let params = ModelParams::init(hyper.clone(), seed)?;
    let base: BTreeMap<String, Tensor<f64>> =
        params.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect();

    let cfg = hyper.dsp;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = cfg.win_len + cfg.hop;
    let channels: Vec<Vec<f32>> = (0..2)
        .map(|_| (0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect())
        .collect();
    let target: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let cf = features::extract(&channels, &cfg)?;
    let tspec = dsp::stft_frames(&target, cf.n_frames, &cfg);
    let grids: LossGrids<f64> = loss_grids(&cf.specs[0], &tspec, cfg.compress_exp)?;
    let feats: Vec<Tensor<f64>> = cf.feats.iter().map(|t| t.cast()).collect();

    let builder = |tape: &mut Tape<f64>,
                   map: &BTreeMap<String, Tensor<f64>>,
                   bind: Bind|
     -> Result<ValueId> {
        let fids: Vec<ValueId> = feats.iter().map(|t| tape.constant(t.clone())).collect();
        let mask = forward_mask_with(tape, &params, Some(map), &fids, bind)?;
        spectral_loss(tape, mask, &grids, 1.0, 1.0)
    };
    fd_check(builder, &base, eps, PROBES_PER_TENSOR, seed ^ 0xfd)
}

/// Check of a plain affine-plus-MSE problem. The loss is quadratic in the
/// weights, so central differences are exact up to rounding.
pub fn grad_check_linear(eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (5, 4, 3);
    let rnd = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let x = Tensor::from_vec(&[m, k], rnd(&mut rng, m * k)).unwrap();
    let target = Tensor::from_vec(&[m, n], rnd(&mut rng, m * n)).unwrap();
    let mut base = BTreeMap::new();
    base.insert("w".to_string(), Tensor::from_vec(&[k, n], rnd(&mut rng, k * n)).unwrap());
    base.insert("b".to_string(), Tensor::from_vec(&[n], rnd(&mut rng, n)).unwrap());

    let builder = |tape: &mut Tape<f64>,
                   map: &BTreeMap<String, Tensor<f64>>,
                   bind: Bind|
     -> Result<ValueId> {
        let xin = tape.constant(x.clone());
        let get = |tape: &mut Tape<f64>, name: &str| match bind {
            Bind::Constants => tape.constant(map.get(name).unwrap().clone()),
            Bind::Params => tape.param(name, map.get(name).unwrap().clone()),
        };
        let w = get(tape, "w");
        let b = get(tape, "b");
        let y = tape.linear(xin, w, b);
        Ok(tape.mse_const(y, target.clone()))
    };
    fd_check(builder, &base, eps, PROBES_PER_TENSOR, seed ^ 0xfd)
}
