//! Tape graph for the mask estimator.
//!
//! One builder serves inference (weights bound as constants) and training
//! (weights bound as named parameters). Module weights are fetched through a
//! cache so a block applied to many channels shares one tape value per
//! tensor; the parameter schema and this builder are kept in lock-step by a
//! test that asserts every schema tensor is consumed exactly once.

use super::params::ModelParams;
use super::{Ablation, Hyper};
use crate::error::{Error, Result};
use crate::nn::{GruIds, MhaIds, Scalar, Tape, Tensor, ValueId};
use std::collections::BTreeMap;

/// How model weights enter the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Frozen: backward treats them as constants.
    Constants,
    /// Registered by name: backward returns a gradient per tensor.
    Params,
}

struct Ctx<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    store: &'a ModelParams,
    /// Full-precision replacements consulted before the f32 store; lets the
    /// gradient checker evaluate at perturbed 64-bit points exactly.
    overrides: Option<&'a BTreeMap<String, Tensor<S>>>,
    bind: Bind,
    cache: BTreeMap<String, ValueId>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    fn get(&mut self, name: &str) -> ValueId {
        if let Some(&id) = self.cache.get(name) {
            return id;
        }
        let t: Tensor<S> = match self.overrides.and_then(|m| m.get(name)) {
            Some(t) => t.clone(),
            None => self.store.get(name).cast(),
        };
        let id = match self.bind {
            Bind::Constants => self.tape.constant(t),
            Bind::Params => self.tape.param(name, t),
        };
        self.cache.insert(name.to_string(), id);
        id
    }

    fn gru_ids(&mut self, prefix: &str) -> GruIds {
        GruIds {
            wih: self.get(&format!("{prefix}.wih")),
            whh: self.get(&format!("{prefix}.whh")),
            bih: self.get(&format!("{prefix}.bih")),
            bhh: self.get(&format!("{prefix}.bhh")),
        }
    }

    fn ln(&mut self, x: ValueId, prefix: &str) -> ValueId {
        let g = self.get(&format!("{prefix}.g"));
        let b = self.get(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b)
    }

    /// Dual-path block over `[T, F', D]`: frequency Bi-GRU, causal temporal
    /// GRU, gated pointwise fusion; each pre-normalized with a residual.
    fn dpr(&mut self, prefix: &str, h: ValueId) -> ValueId {
        let ln = self.ln(h, &format!("{prefix}.freq.ln"));
        let fwd = self.gru_ids(&format!("{prefix}.freq.fwd"));
        let bwd = self.gru_ids(&format!("{prefix}.freq.bwd"));
        let wp = self.get(&format!("{prefix}.freq.proj.w"));
        let bp = self.get(&format!("{prefix}.freq.proj.b"));
        let fr = self.tape.bigru_proj(ln, fwd, bwd, wp, bp);
        let h = self.tape.add(h, fr);

        let ht = self.tape.permute3(h, [1, 0, 2]);
        let ln = self.ln(ht, &format!("{prefix}.time.ln"));
        let gru = self.gru_ids(&format!("{prefix}.time.gru"));
        let tr = self.tape.gru_seq(ln, gru);
        let ht = self.tape.add(ht, tr);
        let h = self.tape.permute3(ht, [1, 0, 2]);

        let ln = self.ln(h, &format!("{prefix}.glu.ln"));
        let wa = self.get(&format!("{prefix}.glu.a.w"));
        let ba = self.get(&format!("{prefix}.glu.a.b"));
        let wb = self.get(&format!("{prefix}.glu.b.w"));
        let bb = self.get(&format!("{prefix}.glu.b.b"));
        let g = self.tape.conv_glu(ln, wa, ba, wb, bb);
        self.tape.add(h, g)
    }

    /// Reference-query attention over the channel axis: collapses C per-channel
    /// maps to one, with a residual from the reference map.
    fn cca(&mut self, prefix: &str, h_ref: ValueId, hs: &[ValueId], heads: usize) -> ValueId {
        let s = self.tape.val(h_ref).shape().to_vec();
        let (t, f, d) = (s[0], s[1], s[2]);
        let lnq = self.ln(h_ref, &format!("{prefix}.ln_q"));
        let q_in = self.tape.reshape(lnq, &[t * f, 1, d]);
        let stacked = self.tape.stack_channels(hs);
        let lng = self.get(&format!("{prefix}.ln_kv.g"));
        let lnb = self.get(&format!("{prefix}.ln_kv.b"));
        let lnkv = self.tape.layer_norm(stacked, lng, lnb);
        let ids = MhaIds {
            wq: self.get(&format!("{prefix}.wq")),
            bq: self.get(&format!("{prefix}.bq")),
            wk: self.get(&format!("{prefix}.wk")),
            bk: self.get(&format!("{prefix}.bk")),
            wv: self.get(&format!("{prefix}.wv")),
            bv: self.get(&format!("{prefix}.bv")),
            wo: self.get(&format!("{prefix}.wo")),
            bo: self.get(&format!("{prefix}.bo")),
        };
        let q = self.tape.linear(q_in, ids.wq, ids.bq);
        let k = self.tape.linear(lnkv, ids.wk, ids.bk);
        let v = self.tape.linear(lnkv, ids.wv, ids.bv);
        let core = self.tape.attn_core(q, k, v, heads);
        let o = self.tape.linear(core, ids.wo, ids.bo);
        let o3 = self.tape.reshape(o, &[t, f, d]);
        self.tape.add(h_ref, o3)
    }

    /// Transform-average-concatenate channel aggregation (ablation substitute
    /// for attention): per-channel transform, channel mean, concat with the
    /// reference transform, project, residual.
    fn tac(&mut self, prefix: &str, h_ref: ValueId, hs: &[ValueId]) -> ValueId {
        let zw = self.get(&format!("{prefix}.z.w"));
        let zb = self.get(&format!("{prefix}.z.b"));
        let zs: Vec<ValueId> = hs
            .iter()
            .map(|&h| {
                let l = self.tape.linear(h, zw, zb);
                self.tape.tanh(l)
            })
            .collect();
        let mut zsum = zs[0];
        for &z in &zs[1..] {
            zsum = self.tape.add(zsum, z);
        }
        let shape = self.tape.val(zsum).shape().to_vec();
        let n = self.tape.val(zsum).numel();
        let inv = Tensor::from_vec(&shape, vec![S::from_f64(1.0 / hs.len() as f64); n]).unwrap();
        let zmean = self.tape.mul_const(zsum, inv);
        let aw = self.get(&format!("{prefix}.a.w"));
        let ab = self.get(&format!("{prefix}.a.b"));
        let al = self.tape.linear(zmean, aw, ab);
        let a = self.tape.tanh(al);
        let cat = self.tape.concat(&[zs[0], a], 2);
        let ow = self.get(&format!("{prefix}.o.w"));
        let ob = self.get(&format!("{prefix}.o.b"));
        let o = self.tape.linear(cat, ow, ob);
        self.tape.add(h_ref, o)
    }

    fn fuse(&mut self, prefix: &str, hs: &[ValueId], hyper: &Hyper) -> ValueId {
        match hyper.ablation {
            Ablation::Tac => self.tac(prefix, hs[0], hs),
            _ => self.cca(prefix, hs[0], hs, hyper.heads),
        }
    }

    /// `[3, T, F]` features to `[T, F', D]` hidden map.
    fn encoder(&mut self, feat: ValueId, hyper: &Hyper) -> ValueId {
        let mut x = feat;
        for i in 0..hyper.n_enc {
            let w = self.get(&format!("enc.{i}.w"));
            let b = self.get(&format!("enc.{i}.b"));
            let c = self.tape.conv2d_causal(x, w, b, hyper.stride_f);
            x = self.tape.tanh(c);
        }
        self.tape.permute3(x, [1, 2, 0])
    }

    /// `[T, F', D]` hidden map to `[T, F]` mask in (0, 1).
    fn decoder(&mut self, g: ValueId, hyper: &Hyper) -> ValueId {
        let mut x = self.tape.permute3(g, [2, 0, 1]);
        for i in 0..hyper.n_enc {
            let w = self.get(&format!("dec.{i}.w"));
            let b = self.get(&format!("dec.{i}.b"));
            let c = self.tape.convt2d_freq(x, w, b, hyper.stride_f);
            x = self.tape.tanh(c);
        }
        let mw = self.get("mask.w");
        let mb = self.get("mask.b");
        let m = self.tape.conv2d_causal(x, mw, mb, 1);
        let m = self.tape.sigmoid(m);
        let s = self.tape.val(m).shape().to_vec();
        self.tape.reshape(m, &[s[1], s[2]])
    }
}

/// Build the full forward graph from per-channel `[3, T, F]` features
/// (channel 0 is the reference) to a `[T, F]` sigmoid mask.
pub fn forward_mask<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ModelParams,
    feats: &[ValueId],
    bind: Bind,
) -> Result<ValueId> {
    forward_mask_with(tape, store, None, feats, bind)
}

/// Like [`forward_mask`], but tensors present in `overrides` are used in place
/// of the store's f32 values. Shapes must match the schema; only the gradient
/// checker should need this.
pub fn forward_mask_with<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ModelParams,
    overrides: Option<&BTreeMap<String, Tensor<S>>>,
    feats: &[ValueId],
    bind: Bind,
) -> Result<ValueId> {
    let hyper = &store.hyper;
    hyper.validate()?;
    if feats.is_empty() {
        return Err(Error::invalid("need at least one input channel"));
    }
    let fs = tape.val(feats[0]).shape().to_vec();
    if fs.len() != 3 || fs[0] != 3 || fs[2] != hyper.dsp.n_bins() {
        return Err(Error::invalid(format!(
            "features must be [3, T, {}], got {:?}",
            hyper.dsp.n_bins(),
            fs
        )));
    }
    for &f in feats {
        if tape.val(f).shape() != fs.as_slice() {
            return Err(Error::invalid("all channels must share one feature shape"));
        }
    }

    let mut ctx = Ctx { tape, store, overrides, bind, cache: BTreeMap::new() };
    let h_e: Vec<ValueId> = feats.iter().map(|&f| ctx.encoder(f, hyper)).collect();

    // stage 1: shared per-channel refinement, then collapse to the reference
    let (h1, h_r) = if hyper.ablation == Ablation::NoStage1 {
        (h_e.clone(), h_e[0])
    } else {
        let h1: Vec<ValueId> = h_e.iter().map(|&h| ctx.dpr("dpr1", h)).collect();
        let h_r = ctx.fuse("mix1", &h1, hyper);
        (h1, h_r)
    };

    // stage 2: pair the fused reference with each channel, refine, collapse
    let g = if hyper.ablation == Ablation::NoStage2 {
        h_r
    } else {
        let fw = ctx.get("s2.fuse.w");
        let fb = ctx.get("s2.fuse.b");
        let h2: Vec<ValueId> = h1
            .iter()
            .map(|&hc| {
                let cat = ctx.tape.concat(&[h_r, hc], 2);
                let fused = ctx.tape.linear(cat, fw, fb);
                ctx.dpr("dpr2", fused)
            })
            .collect();
        ctx.fuse("mix2", &h2, hyper)
    };

    // stage 3: post-refinement
    let g3 = if hyper.ablation == Ablation::NoStage3 { g } else { ctx.dpr("dpr3", g) };

    let mask = ctx.decoder(g3, hyper);
    debug_assert_eq!(ctx.tape.val(mask).shape(), &[fs[1], hyper.dsp.n_bins()]);
    Ok(mask)
}

/// Tensor names the forward graph consumes for this architecture; used to
/// prove the schema and the builder agree.
#[cfg(test)]
fn consumed_names(store: &ModelParams, n_channels: usize) -> Vec<String> {
    let t = 3;
    let f = store.hyper.dsp.n_bins();
    let mut tape = Tape::<f32>::new();
    let feats: Vec<ValueId> =
        (0..n_channels).map(|_| tape.constant(Tensor::zeros(&[3, t, f]))).collect();
    let mut ctx =
        Ctx { tape: &mut tape, store, overrides: None, bind: Bind::Constants, cache: BTreeMap::new() };
    let hyper = store.hyper.clone();
    let h_e: Vec<ValueId> = feats.iter().map(|&x| ctx.encoder(x, &hyper)).collect();
    let (h1, h_r) = if hyper.ablation == Ablation::NoStage1 {
        (h_e.clone(), h_e[0])
    } else {
        let h1: Vec<ValueId> = h_e.iter().map(|&h| ctx.dpr("dpr1", h)).collect();
        let h_r = ctx.fuse("mix1", &h1, &hyper);
        (h1, h_r)
    };
    let g = if hyper.ablation == Ablation::NoStage2 {
        h_r
    } else {
        let fw = ctx.get("s2.fuse.w");
        let fb = ctx.get("s2.fuse.b");
        let h2: Vec<ValueId> = h1
            .iter()
            .map(|&hc| {
                let cat = ctx.tape.concat(&[h_r, hc], 2);
                let fused = ctx.tape.linear(cat, fw, fb);
                ctx.dpr("dpr2", fused)
            })
            .collect();
        ctx.fuse("mix2", &h2, &hyper)
    };
    let g3 = if hyper.ablation == Ablation::NoStage3 { g } else { ctx.dpr("dpr3", g) };
    let _ = ctx.decoder(g3, &hyper);
    ctx.cache.keys().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::shapes;
    use rand::{Rng, SeedableRng};

    fn toy_store(ablation: Ablation) -> ModelParams {
        ModelParams::init(Hyper { ablation, ..Hyper::toy() }, 3).unwrap()
    }

    fn rand_feats<S: Scalar>(
        tape: &mut Tape<S>,
        c: usize,
        t: usize,
        f: usize,
        seed: u64,
    ) -> Vec<ValueId> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..c)
            .map(|_| {
                let data: Vec<S> =
                    (0..3 * t * f).map(|_| S::from_f64(rng.gen_range(-1.0..1.0))).collect();
                tape.constant(Tensor::from_vec(&[3, t, f], data).unwrap())
            })
            .collect()
    }

    #[test]
    fn mask_shape_and_range() {
        let store = toy_store(Ablation::None);
        let mut tape = Tape::<f32>::new();
        let feats = rand_feats(&mut tape, 2, 4, 257, 1);
        let mask = forward_mask(&mut tape, &store, &feats, Bind::Constants).unwrap();
        let m = tape.val(mask);
        assert_eq!(m.shape(), &[4, 257]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0 && v.is_finite()));
    }

    #[test]
    fn every_variant_builds_and_masks() {
        for ab in [
            Ablation::None,
            Ablation::NoStage1,
            Ablation::NoStage2,
            Ablation::NoStage3,
            Ablation::Tac,
        ] {
            let store = toy_store(ab);
            let mut tape = Tape::<f32>::new();
            let feats = rand_feats(&mut tape, 3, 3, 257, 2);
            let mask = forward_mask(&mut tape, &store, &feats, Bind::Constants).unwrap();
            assert_eq!(tape.val(mask).shape(), &[3, 257], "{:?}", ab);
            assert!(tape.val(mask).all_finite(), "{:?}", ab);
        }
    }

    #[test]
    fn builder_consumes_exactly_the_schema() {
        for ab in [
            Ablation::None,
            Ablation::NoStage1,
            Ablation::NoStage2,
            Ablation::NoStage3,
            Ablation::Tac,
        ] {
            let store = toy_store(ab);
            let mut used = consumed_names(&store, 2);
            used.sort();
            let want: Vec<String> = shapes(&store.hyper).keys().cloned().collect();
            assert_eq!(used, want, "{:?}: builder and schema disagree", ab);
        }
    }

    #[test]
    fn any_channel_count_runs_with_one_parameter_set() {
        let store = toy_store(Ablation::None);
        for c in 1..=4 {
            let mut tape = Tape::<f32>::new();
            let feats = rand_feats(&mut tape, c, 2, 257, 7);
            let mask = forward_mask(&mut tape, &store, &feats, Bind::Constants).unwrap();
            assert!(tape.val(mask).all_finite(), "C={}", c);
        }
    }

    #[test]
    fn permuting_non_reference_channels_leaves_mask_unchanged() {
        let store = toy_store(Ablation::None);
        // f64 so the only differences would come from genuine asymmetry, not
        // accumulated rounding
        let run = |order: &[usize]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let all = rand_feats(&mut tape, 3, 3, 257, 11);
            let feats: Vec<ValueId> = order.iter().map(|&i| all[i]).collect();
            let mask = forward_mask(&mut tape, &store, &feats, Bind::Constants).unwrap();
            tape.val(mask).data().to_vec()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[0, 2, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn training_bind_returns_finite_grads_for_all_tensors() {
        let store = toy_store(Ablation::None);
        let mut tape = Tape::<f32>::new();
        let feats = rand_feats(&mut tape, 2, 3, 257, 5);
        let mask = forward_mask(&mut tape, &store, &feats, Bind::Params).unwrap();
        let target = Tensor::zeros(&[3, 257]);
        let loss = tape.mse_const(mask, target);
        let grads = tape.backward(loss);
        assert_eq!(grads.len(), store.tensors.len());
        for (name, g) in &grads {
            assert!(g.all_finite(), "{} gradient not finite", name);
            assert_eq!(g.shape(), store.get(name).shape(), "{} shape", name);
        }
    }
}
