//! Epoch loop with checkpointing and deterministic resume.
//!
//! Every random draw comes from a per-epoch stream seeded by (seed, epoch),
//! so a resumed run replays exactly the batches an uninterrupted run would
//! have seen. Per-sample gradients are computed in parallel but reduced in
//! manifest order, which keeps runs bit-identical across thread counts.

use super::adamw::{optimizer_step, AdamWState};
use super::augment::{apply, plan, AugmentPlan};
use super::loss::{loss_grids, spectral_loss, LossGrids};
use super::TrainConfig;
use crate::dsp;
use crate::error::{Error, Result};
use crate::model::net::Bind;
use crate::model::{features, forward_mask, Hyper, ModelParams};
use crate::nn::{Tape, Tensor, ValueId};
use crate::sim::{load_recording, ManifestEntry, MultichannelRecording};
use crate::util::parallel_map;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const LAST_PARAMS: &str = "last.lnp";
pub const LAST_OPT: &str = "last.opt.json";
pub const BEST_PARAMS: &str = "best.lnp";
pub const CURVES: &str = "curves.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Optimizer steps skipped because the gradient went non-finite.
    pub rejected_steps: usize,
}

/// On-disk companion of the `last` checkpoint; everything a resumed run
/// needs besides the weights themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResumeRecord {
    pub next_epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub curve: Vec<EpochStats>,
    pub adamw: AdamWState,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights at the best validation epoch.
    pub params: ModelParams,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Train on a manifest small enough to hold in memory. `out_dir` receives
/// `last.lnp`/`last.opt.json` every epoch, `best.lnp` whenever validation
/// improves, and the loss curves as one JSON line per epoch. `resume_from`
/// points at a directory holding a previous run's `last` checkpoint pair.
pub fn train_toy(
    entries: &[ManifestEntry],
    dir: &Path,
    hyper: &Hyper,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hyper.validate()?;
    if entries.is_empty() {
        return Err(Error::invalid("training manifest is empty"));
    }

    let recs: Vec<MultichannelRecording> =
        parallel_map(entries.to_vec(), |_, e| load_recording(&e, dir))
            .into_iter()
            .collect::<Result<_>>()?;
    for (e, r) in entries.iter().zip(&recs) {
        if r.sample_rate != hyper.dsp.sample_rate {
            return Err(Error::Config(format!(
                "utterance '{}' is sampled at {} Hz, the model expects {}",
                e.id, r.sample_rate, hyper.dsp.sample_rate
            )));
        }
        if r.n_channels() < cfg.c_range[1] {
            return Err(Error::Config(format!(
                "utterance '{}' has {} channels, the channel range needs {}",
                e.id,
                r.n_channels(),
                cfg.c_range[1]
            )));
        }
    }

    let n = recs.len();
    let val_n = if n == 1 {
        0
    } else {
        ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1)
    };
    let train_idx: Vec<usize> = (0..n - val_n).collect();
    let val_idx: Vec<usize> = if val_n == 0 { vec![0] } else { (n - val_n..n).collect() };

    let seg_len = (cfg.segment_seconds * hyper.dsp.sample_rate as f64) as usize;
    let seg_list = |idxs: &[usize]| -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for &ri in idxs {
            for (s, l) in segments(recs[ri].len(), seg_len) {
                v.push((ri, s, l));
            }
        }
        v
    };
    let train_segs = seg_list(&train_idx);
    let val_segs = seg_list(&val_idx);
    if train_segs.is_empty() {
        return Err(Error::invalid("no usable training segments"));
    }

    let (mut params, mut opt, mut curve, mut best_val, mut best_epoch, start_epoch) =
        match resume_from {
            Some(ck) => {
                let params = ModelParams::load(&ck.join(LAST_PARAMS))?;
                if params.hyper != *hyper {
                    return Err(Error::Config(
                        "checkpoint architecture does not match the requested model".into(),
                    ));
                }
                let text = fs::read_to_string(ck.join(LAST_OPT))?;
                let rs: ResumeRecord = serde_json::from_str(&text)
                    .map_err(|e| Error::CorruptModel(format!("resume record: {e}")))?;
                (params, rs.adamw, rs.curve, rs.best_val, rs.best_epoch, rs.next_epoch)
            }
            None => (
                ModelParams::init(hyper.clone(), cfg.seed)?,
                AdamWState::new(),
                Vec::new(),
                f64::INFINITY,
                0,
                0,
            ),
        };
    let mut best_params = match resume_from {
        Some(ck) if ck.join(BEST_PARAMS).exists() => ModelParams::load(&ck.join(BEST_PARAMS))?,
        _ => params.clone(),
    };

    if let Some(out) = out_dir {
        fs::create_dir_all(out)?;
    }

    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let mut order = train_segs.clone();
        order.shuffle(&mut rng);
        let jobs: Vec<(usize, usize, usize, AugmentPlan)> = order
            .iter()
            .map(|&(ri, s, l)| {
                plan(&mut rng, recs[ri].n_channels(), cfg.c_range).map(|p| (ri, s, l, p))
            })
            .collect::<Result<_>>()?;

        let mut loss_sum = 0.0;
        let mut rejected = 0usize;
        for (bi, batch) in jobs.chunks(cfg.batch).enumerate() {
            let outs = parallel_map(batch.to_vec(), |_, (ri, s, l, p)| {
                sample_pass(&recs[ri], &p, s, l, &params, cfg, true)
            });
            let mut acc: Option<BTreeMap<String, Tensor<f32>>> = None;
            let mut batch_loss = 0.0;
            for out in outs {
                let (lv, grads) = out?;
                batch_loss += lv;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (name, g) in grads {
                            let t = a.get_mut(&name).expect("schema is fixed");
                            for (o, &x) in t.data_mut().iter_mut().zip(g.data()) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            let k = batch.len() as f64;
            batch_loss /= k;
            if !batch_loss.is_finite() {
                return Err(diverged(epoch, Some(bi), batch_loss, &curve));
            }
            loss_sum += batch_loss * k;
            let mut grads = acc.expect("batch is non-empty");
            for g in grads.values_mut() {
                let inv = (1.0 / k) as f32;
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            let rep =
                optimizer_step(&mut params.tensors, &grads, &mut opt, lr, cfg.clip_norm, cfg.weight_decay)?;
            if !rep.applied {
                rejected += 1;
            }
        }
        let train_loss = loss_sum / train_segs.len() as f64;

        // Validation: fixed conditions, reference 0, the configured channel
        // budget, no permutation.
        let val_out = parallel_map(val_segs.clone(), |_, (ri, s, l)| {
            let c = cfg.c_range[1].min(recs[ri].n_channels());
            let p = AugmentPlan { order: (0..c).collect() };
            sample_pass(&recs[ri], &p, s, l, &params, cfg, false)
        });
        let mut val_sum = 0.0;
        for out in val_out {
            val_sum += out?.0;
        }
        let val_loss = val_sum / val_segs.len() as f64;
        if !val_loss.is_finite() {
            return Err(diverged(epoch, None, val_loss, &curve));
        }

        curve.push(EpochStats { epoch, lr, train_loss, val_loss, rejected_steps: rejected });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            if let Some(out) = out_dir {
                best_params.save(&out.join(BEST_PARAMS))?;
            }
        }
        if let Some(out) = out_dir {
            params.save(&out.join(LAST_PARAMS))?;
            let rs = ResumeRecord {
                next_epoch: epoch + 1,
                best_epoch,
                best_val,
                curve: curve.clone(),
                adamw: opt.clone(),
            };
            let text = serde_json::to_string(&rs)
                .map_err(|e| Error::Numerical(format!("resume record: {e}")))?;
            fs::write(out.join(LAST_OPT), text)?;
            let mut lines = String::new();
            for st in &curve {
                lines.push_str(&serde_json::to_string(st).expect("stats serialize"));
                lines.push('\n');
            }
            fs::write(out.join(CURVES), lines)?;
        }
    }

    if curve.is_empty() {
        return Err(Error::invalid("nothing to do: resume point is at or past the epoch budget"));
    }
    Ok(TrainOutcome { params: best_params, curve, best_epoch, best_val })
}

/// Forward (and optionally backward) for one segment. Returns the loss and,
/// when `with_grads`, the gradient map.
fn sample_pass(
    rec: &MultichannelRecording,
    p: &AugmentPlan,
    start: usize,
    len: usize,
    params: &ModelParams,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let sample = apply(rec, p, start, len)?;
    let dcfg = params.hyper.dsp;
    let cf = features::extract(&sample.channels, &dcfg)?;
    let target: Vec<f64> = sample.target.iter().map(|&x| x as f64).collect();
    let tspec = dsp::stft_frames(&target, cf.n_frames, &dcfg);
    let grids: LossGrids<f32> = loss_grids(&cf.specs[0], &tspec, dcfg.compress_exp)?;

    let mut tape: Tape<f32> = Tape::new();
    let fids: Vec<ValueId> = cf.feats.iter().map(|t| tape.constant(t.clone())).collect();
    let bind = if with_grads { Bind::Params } else { Bind::Constants };
    let mask = forward_mask(&mut tape, params, &fids, bind)?;
    let loss = spectral_loss(&mut tape, mask, &grids, cfg.mag_weight, cfg.complex_weight)?;
    let lv = tape.val(loss).item() as f64;
    let grads = if with_grads { tape.backward(loss) } else { BTreeMap::new() };
    Ok((lv, grads))
}

/// Non-overlapping segment spans; a recording shorter than one segment is
/// used whole, a tail shorter than a segment is dropped.
fn segments(len: usize, seg: usize) -> Vec<(usize, usize)> {
    if len == 0 {
        return Vec::new();
    }
    if len <= seg {
        return vec![(0, len)];
    }
    let mut v = Vec::new();
    let mut s = 0;
    while s + seg <= len {
        v.push((s, seg));
        s += seg;
    }
    v
}

fn diverged(epoch: usize, batch: Option<usize>, loss: f64, curve: &[EpochStats]) -> Error {
    let at = match batch {
        Some(b) => format!("epoch {epoch}, batch {b}"),
        None => format!("epoch {epoch}, validation"),
    };
    let last = match curve.last() {
        Some(st) => format!(
            "last finite epoch {}: train {:.6}, val {:.6}",
            st.epoch, st.train_loss, st.val_loss
        ),
        None => "no finite epoch completed".to_string(),
    };
    Error::Diverged(format!("{at}: loss {loss} is not finite; {last}"))
}

/// Per-epoch stream seed; a SplitMix64 step keeps epochs decorrelated even
/// for adjacent seeds.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
