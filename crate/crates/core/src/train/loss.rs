//! Differentiable mask-training objective.
//!
//! The loss compares the masked compressed-magnitude spectrum against the
//! target on two fronts: the magnitude plane itself and the compressed
//! complex plane rebuilt with the input phase. Everything except the mask is
//! a constant grid, so gradients flow only through the network output; the
//! phase-retrieval refinement stays out of the graph entirely.

use crate::dsp::{self, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tape, Tensor, ValueId};

/// Per-sample constant grids, all `[T, F]`, precomputed from the reference
/// input spectrum and the aligned target spectrum.
#[derive(Debug, Clone)]
pub struct LossGrids<S: Scalar> {
    /// Compressed magnitude of the reference input; the mask multiplies this.
    pub in_mag: Tensor<S>,
    /// Unit phase of the reference input.
    pub cos: Tensor<S>,
    pub sin: Tensor<S>,
    /// Compressed magnitude of the target.
    pub target_mag: Tensor<S>,
    /// Compressed complex planes of the target.
    pub target_re: Tensor<S>,
    pub target_im: Tensor<S>,
}

pub fn loss_grids<S: Scalar>(
    input: &Spectrogram,
    target: &Spectrogram,
    p: f64,
) -> Result<LossGrids<S>> {
    if input.n_frames != target.n_frames || input.n_bins != target.n_bins {
        return Err(Error::contract(format!(
            "input grid {}x{} does not match target grid {}x{}",
            input.n_frames, input.n_bins, target.n_frames, target.n_bins
        )));
    }
    let shape = [input.n_frames, input.n_bins];
    let tens = |v: Vec<f64>| {
        Tensor::from_vec(&shape, v.into_iter().map(S::from_f64).collect()).expect("grid shape")
    };
    let in_mag = tens(dsp::compress_mag(input, p));
    let mut cos = Vec::with_capacity(input.data.len());
    let mut sin = Vec::with_capacity(input.data.len());
    for z in &input.data {
        let m = z.norm();
        if m == 0.0 {
            cos.push(1.0);
            sin.push(0.0);
        } else {
            cos.push(z.re / m);
            sin.push(z.im / m);
        }
    }
    let cc = dsp::compressed_complex(target, p);
    Ok(LossGrids {
        in_mag,
        cos: tens(cos),
        sin: tens(sin),
        target_mag: tens(dsp::compress_mag(target, p)),
        target_re: tens(cc.iter().map(|c| c.0).collect()),
        target_im: tens(cc.iter().map(|c| c.1).collect()),
    })
}

/// Attach the loss to a `[T, F]` mask value already on the tape. Returns the
/// scalar loss id: `alpha * MSE(mag) + beta * MSE(complex)`, where the complex
/// term averages the real and imaginary planes so it is one MSE over pairs.
pub fn spectral_loss<S: Scalar>(
    tape: &mut Tape<S>,
    mask: ValueId,
    grids: &LossGrids<S>,
    alpha: f64,
    beta: f64,
) -> Result<ValueId> {
    if tape.val(mask).shape() != grids.in_mag.shape() {
        return Err(Error::contract(format!(
            "mask shape {:?} does not match loss grids {:?}",
            tape.val(mask).shape(),
            grids.in_mag.shape()
        )));
    }
    let est_mag = tape.mul_const(mask, grids.in_mag.clone());
    let est_re = tape.mul_const(est_mag, grids.cos.clone());
    let est_im = tape.mul_const(est_mag, grids.sin.clone());
    let l_mag = tape.mse_const(est_mag, grids.target_mag.clone());
    let l_re = tape.mse_const(est_re, grids.target_re.clone());
    let l_im = tape.mse_const(est_im, grids.target_im.clone());
    Ok(tape.weighted_sum(&[
        (l_mag, S::from_f64(alpha)),
        (l_re, S::from_f64(beta * 0.5)),
        (l_im, S::from_f64(beta * 0.5)),
    ]))
}
