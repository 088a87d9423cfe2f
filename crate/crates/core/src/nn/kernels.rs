//! Shared numeric cores. The tape ops and the streaming engine both call
//! these, so offline and online inference agree to rounding error.

use super::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `out[m, n] += x[m, k] * w[k, n]`, row-major.
pub fn matmul_acc<S: Scalar>(x: &[S], w: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (kk, &xv) in xr.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let wr = &w[kk * n..(kk + 1) * n];
            for j in 0..n {
                or[j] = or[j] + xv * wr[j];
            }
        }
    }
}

/// `out[m, k] += dy[m, n] * w[k, n]^T` (multiply by the transpose of `w`).
pub fn matmul_acc_wt<S: Scalar>(dy: &[S], w: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let dr = &dy[i * n..(i + 1) * n];
        let or = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let wr = &w[kk * n..(kk + 1) * n];
            let mut s = S::zero();
            for j in 0..n {
                s = s + dr[j] * wr[j];
            }
            or[kk] = or[kk] + s;
        }
    }
}

/// `out[k, n] += x[m, k]^T * dy[m, n]`.
pub fn matmul_acc_xt<S: Scalar>(x: &[S], dy: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        let dr = &dy[i * n..(i + 1) * n];
        for (kk, &xv) in xr.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let or = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                or[j] = or[j] + xv * dr[j];
            }
        }
    }
}

/// One GRU step over a batch of `rows` independent sequences.
///
/// Gate order along the 3H axis is (reset, update, candidate). `gx_t` holds
/// the input projection `x_t*W_ih + b_ih` for this step; the hidden
/// projection `h_prev*W_hh + b_hh` is computed here. `g_out` keeps the
/// candidate's hidden-side pre-activation (needed for backprop), `cand_out`
/// the tanh candidate itself.
#[allow(clippy::too_many_arguments)]
pub fn gru_step<S: Scalar>(
    gx_t: &[S],
    h_prev: &[S],
    whh: &[S],
    bhh: &[S],
    rows: usize,
    h: usize,
    r_out: &mut [S],
    z_out: &mut [S],
    cand_out: &mut [S],
    g_out: &mut [S],
    h_out: &mut [S],
) {
    let h3 = 3 * h;
    debug_assert_eq!(gx_t.len(), rows * h3);
    debug_assert_eq!(h_prev.len(), rows * h);
    let mut gh = vec![S::zero(); rows * h3];
    for row in gh.chunks_mut(h3) {
        row.copy_from_slice(bhh);
    }
    matmul_acc(h_prev, whh, rows, h, h3, &mut gh);
    for i in 0..rows {
        let gx = &gx_t[i * h3..(i + 1) * h3];
        let gh = &gh[i * h3..(i + 1) * h3];
        let hp = &h_prev[i * h..(i + 1) * h];
        for j in 0..h {
            let r = sigmoid(gx[j] + gh[j]);
            let z = sigmoid(gx[h + j] + gh[h + j]);
            let g = gh[2 * h + j];
            let cand = (gx[2 * h + j] + r * g).tanh();
            r_out[i * h + j] = r;
            z_out[i * h + j] = z;
            g_out[i * h + j] = g;
            cand_out[i * h + j] = cand;
            h_out[i * h + j] = (S::one() - z) * cand + z * hp[j];
        }
    }
}

/// Row-wise layer norm over the last axis (`n` wide), eps 1e-5.
pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    n: usize,
    out: &mut [S],
    mut stats: Option<(&mut Vec<S>, &mut Vec<S>)>,
) {
    let eps = S::from_f64(LAYER_NORM_EPS);
    let rows = x.len() / n;
    let inv_n = S::one() / S::from_f64(n as f64);
    for i in 0..rows {
        let xr = &x[i * n..(i + 1) * n];
        let mut mean = S::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = S::zero();
        for &v in xr {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let rstd = S::one() / (var + eps).sqrt();
        if let Some((ms, rs)) = stats.as_mut() {
            ms.push(mean);
            rs.push(rstd);
        }
        let or = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            or[j] = gamma[j] * (xr[j] - mean) * rstd + beta[j];
        }
    }
}

/// Scaled dot-product attention for one batch item.
///
/// `q`: [lq, d], `k`/`v`: [lk, d], `heads` splitting d evenly. Writes the
/// attended output to `out` [lq, d]; if `weights_out` is given it receives
/// the softmax weights laid out [heads, lq, lk].
#[allow(clippy::too_many_arguments)]
pub fn attn_single<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    out: &mut [S],
    mut weights_out: Option<&mut [S]>,
) {
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut row = vec![S::zero(); lk];
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..lq {
            let qr = &q[i * d + off..i * d + off + dh];
            let mut maxv = S::neg_infinity();
            for (j, rr) in row.iter_mut().enumerate() {
                let kr = &k[j * d + off..j * d + off + dh];
                let mut s = S::zero();
                for t in 0..dh {
                    s = s + qr[t] * kr[t];
                }
                *rr = s * scale;
                if *rr > maxv {
                    maxv = *rr;
                }
            }
            // Reductions over the key axis accumulate in f64 so the result is
            // insensitive to key order; keys are microphone channels upstream.
            let mut denom = 0.0f64;
            for rr in row.iter_mut() {
                *rr = (*rr - maxv).exp();
                denom += rr.to_f64s();
            }
            for rr in row.iter_mut() {
                *rr = S::from_f64(rr.to_f64s() / denom);
            }
            if let Some(wo) = weights_out.as_mut() {
                let base = (hd * lq + i) * lk;
                wo[base..base + lk].copy_from_slice(&row);
            }
            let or = &mut out[i * d + off..i * d + off + dh];
            for t in 0..dh {
                let mut s = 0.0f64;
                for (j, &w) in row.iter().enumerate() {
                    s += w.to_f64s() * v[j * d + off + t].to_f64s();
                }
                or[t] = S::from_f64(s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let (m, k, n) = (3usize, 4, 5);
        let x: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut got = vec![0.0; m * n];
        matmul_acc(&x, &w, m, k, n, &mut got);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += x[i * k + kk] * w[kk * n + j];
                }
                assert!((got[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_update_gate_one_freezes_state() {
        // Large positive update-gate biases drive z to ~1, so h stays at h0
        // regardless of the input.
        let (rows, din, h) = (2usize, 3, 4);
        let wih = vec![0.0; din * 3 * h];
        let whh = vec![0.0; h * 3 * h];
        let mut bih = vec![0.0; 3 * h];
        for j in 0..h {
            bih[h + j] = 60.0; // update gate slot
        }
        let bhh = vec![0.0; 3 * h];
        let h0: Vec<f64> = (0..rows * h).map(|i| i as f64 * 0.1 - 0.3).collect();
        // gx for an arbitrary input
        let x: Vec<f64> = (0..rows * din).map(|i| (i as f64).cos()).collect();
        let mut gx = vec![0.0; rows * 3 * h];
        for r in gx.chunks_mut(3 * h) {
            r.copy_from_slice(&bih);
        }
        matmul_acc(&x, &wih, rows, din, 3 * h, &mut gx);
        let mut r = vec![0.0; rows * h];
        let mut z = vec![0.0; rows * h];
        let mut c = vec![0.0; rows * h];
        let mut g = vec![0.0; rows * h];
        let mut hn = vec![0.0; rows * h];
        gru_step(&gx, &h0, &whh, &bhh, rows, h, &mut r, &mut z, &mut c, &mut g, &mut hn);
        for i in 0..rows * h {
            assert!((hn[i] - h0[i]).abs() < 1e-12, "state moved: {} vs {}", hn[i], h0[i]);
        }
    }

    #[test]
    fn attn_identical_keys_average_values() {
        // With all keys equal the softmax is uniform, so output = mean(v).
        let (lq, lk, d, heads) = (1usize, 4, 6, 3);
        let q: Vec<f64> = (0..d).map(|i| i as f64 * 0.2).collect();
        let k = vec![0.5; lk * d];
        let v: Vec<f64> = (0..lk * d).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut out = vec![0.0; lq * d];
        attn_single(&q, &k, &v, lq, lk, d, heads, &mut out, None);
        for t in 0..d {
            let mean: f64 = (0..lk).map(|j| v[j * d + t]).sum::<f64>() / lk as f64;
            assert!((out[t] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let n = 8;
        let x: Vec<f64> = (0..2 * n).map(|i| i as f64 * 1.3 - 4.0).collect();
        let gamma = vec![1.0; n];
        let beta = vec![0.0; n];
        let mut out = vec![0.0; 2 * n];
        layer_norm_rows(&x, &gamma, &beta, n, &mut out, None);
        for r in 0..2 {
            let row = &out[r * n..(r + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }
}
