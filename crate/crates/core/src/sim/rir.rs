//! Image-method room impulse responses.
//!
//! Rigid shoebox walls with one uniform reflection coefficient derived from
//! the requested T60. Image amplitudes follow the point-source law 1/(4 pi d)
//! with one reflection-coefficient factor per wall bounce; arrival times are
//! rounded to the nearest sample (no fractional-delay interpolation).

use super::{dist, RoomSpec};
use crate::error::{Error, Result};

/// Uniform absorption from the T60 target: alpha = 0.161 V / (S T60).
/// Requests the surfaces cannot honor (alpha above 1) saturate just below
/// total absorption, making the room as dead as the geometry allows.
pub fn sabine_absorption(room: &RoomSpec) -> f64 {
    let v = room.length * room.width * room.height;
    let s = 2.0
        * (room.length * room.width + room.length * room.height + room.width * room.height);
    (0.161 * v / (s * room.t60)).min(0.9999)
}

/// RIR from `src` to `mic` with absorption taken from the room's T60.
pub fn simulate_rir(room: &RoomSpec, src: [f64; 3], mic: [f64; 3], fs: u32) -> Result<Vec<f64>> {
    simulate_rir_with_absorption(room, src, mic, fs, sabine_absorption(room))
}

/// RIR with an explicit absorption coefficient in (0, 1]. `alpha` = 1 is the
/// anechoic limit: a single tap at the direct-path delay.
pub fn simulate_rir_with_absorption(
    room: &RoomSpec,
    src: [f64; 3],
    mic: [f64; 3],
    fs: u32,
    alpha: f64,
) -> Result<Vec<f64>> {
    room.validate()?;
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::invalid("source and microphone must lie strictly inside the room"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("absorption must lie in [0, 1]"));
    }
    let d_direct = dist(src, mic);
    if d_direct < 1e-3 {
        return Err(Error::invalid("source and microphone coincide"));
    }
    let c = room.speed_of_sound;
    let fs_f = fs as f64;
    let beta = (1.0 - alpha).sqrt();

    // cover the direct delay plus the full decay with some tail margin, so
    // energy-decay measurements are not cut off by the buffer itself
    let n_taps = ((d_direct / c + 1.25 * room.t60) * fs_f).ceil() as usize + 1;
    let d_max = c * n_taps as f64 / fs_f;
    let mut h = vec![0.0f64; n_taps];

    let order = |l: f64| (d_max / (2.0 * l)).ceil() as i64 + 1;
    let (nx, ny, nz) = (order(room.length), order(room.width), order(room.height));
    let dims = room.dims();
    for gx in -nx..=nx {
        for qx in 0..2i64 {
            let ix = (1 - 2 * qx) as f64 * src[0] + 2.0 * gx as f64 * dims[0];
            let rx = (gx - qx).unsigned_abs() + gx.unsigned_abs();
            for gy in -ny..=ny {
                for qy in 0..2i64 {
                    let iy = (1 - 2 * qy) as f64 * src[1] + 2.0 * gy as f64 * dims[1];
                    let ry = (gy - qy).unsigned_abs() + gy.unsigned_abs();
                    for gz in -nz..=nz {
                        for qz in 0..2i64 {
                            let iz = (1 - 2 * qz) as f64 * src[2] + 2.0 * gz as f64 * dims[2];
                            let rz = (gz - qz).unsigned_abs() + gz.unsigned_abs();
                            let d = dist([ix, iy, iz], mic);
                            let tap = (d / c * fs_f).round() as usize;
                            if tap >= n_taps {
                                continue;
                            }
                            let bounces = (rx + ry + rz) as i32;
                            let gain = beta.powi(bounces) / (4.0 * std::f64::consts::PI * d);
                            h[tap] += gain;
                        }
                    }
                }
            }
        }
    }
    Ok(h)
}
