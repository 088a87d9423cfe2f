//! Analytic multiply-accumulate counts per STFT frame.
//!
//! Counts cover the dense work (convolutions, linear maps, recurrent gates,
//! attention scores and mixtures); pointwise ops and normalizations are
//! excluded. The shared-per-channel structure makes the total exactly affine
//! in the channel count, which a test asserts.

use super::{Ablation, Hyper};

/// MACs per frame for a `c`-channel input.
pub fn macs_per_frame(h: &Hyper, c: usize) -> u64 {
    let d = h.d as u64;
    let c = c as u64;
    let ladder: Vec<u64> = h.f_ladder().iter().map(|&f| f as u64).collect();
    let fp = *ladder.last().unwrap();
    let k = (h.kt * h.kf) as u64;

    let mut enc_per_ch = 0u64;
    for i in 0..h.n_enc {
        let cin = if i == 0 { 3 } else { d as usize } as u64;
        enc_per_ch += d * cin * k * ladder[i + 1];
    }

    // per frame: frequency Bi-GRU (2 dirs x 3 gates x D(D+D)) + 2D->D
    // projection + temporal GRU gates + two gating linears
    let dpr = 22 * d * d * fp;

    let attn_fuse = |c: u64| (2 + 2 * c) * fp * d * d + 2 * c * fp * d;
    let tac_fuse = |c: u64| (c + 3) * fp * d * d;
    let fuse = |c: u64| match h.ablation {
        Ablation::Tac => tac_fuse(c),
        _ => attn_fuse(c),
    };

    let mut dec = 0u64;
    for i in 0..h.n_enc {
        dec += d * d * k * ladder[h.n_enc - i]; // each input position feeds k * d outputs
    }
    dec += d * ladder[0]; // pointwise mask head

    let mut total = c * enc_per_ch;
    if h.ablation != Ablation::NoStage1 {
        total += c * dpr + fuse(c);
    }
    if h.ablation != Ablation::NoStage2 {
        total += c * (2 * d * d * fp) + c * dpr + fuse(c);
    }
    if h.ablation != Ablation::NoStage3 {
        total += dpr;
    }
    total + dec
}

/// MACs per second of audio: frames arrive every `hop` samples.
pub fn macs_per_second(h: &Hyper, c: usize) -> u64 {
    macs_per_frame(h, c) * (h.dsp.sample_rate as u64) / (h.dsp.hop as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_cost_at_six_channels() {
        let h = Hyper::default();
        assert_eq!(macs_per_frame(&h, 6), 7_676_140);
        let per_sec = macs_per_second(&h, 6);
        assert!((1e8 as u64..1e9 as u64).contains(&per_sec), "{}", per_sec);
    }

    #[test]
    fn cost_is_affine_in_channel_count() {
        let h = Hyper::default();
        let base = macs_per_frame(&h, 1);
        let slope = macs_per_frame(&h, 2) - base;
        for c in 1..=12 {
            assert_eq!(macs_per_frame(&h, c), base + slope * (c as u64 - 1), "c={}", c);
        }
    }

    #[test]
    fn stage_removal_cost_ordering() {
        let at = |a: Ablation| macs_per_frame(&Hyper { ablation: a, ..Hyper::default() }, 6);
        let full = at(Ablation::None);
        let s1 = at(Ablation::NoStage1);
        let s2 = at(Ablation::NoStage2);
        let s3 = at(Ablation::NoStage3);
        // removing stage 2 saves the most, stage 3 the least
        assert!(s2 < s1, "{} vs {}", s2, s1);
        assert!(s1 < s3, "{} vs {}", s1, s3);
        assert!(s3 < full, "{} vs {}", s3, full);
    }
}
