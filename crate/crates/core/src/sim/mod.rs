//! Room simulation and dataset synthesis.
//!
//! Scenes are shoebox rooms with one speech source, one to three point noise
//! sources, and an ad-hoc scatter of microphones. Impulse responses come from
//! the image method; mixing scales the summed reverberant noise so the
//! signal-to-noise ratio measured on the reference channel equals the sampled
//! value. Every recording carries its exact speech/noise decomposition, which
//! the oracle beamformer and the trainer both consume.

mod dataset;
mod mix;
mod rir;
mod scene;
mod source;

pub use dataset::{
    build_dataset, load_recording, read_manifest, write_manifest, BuildConfig, BuildReport,
    ManifestEntry, SourceSpec,
};
pub use mix::{convolve, mix_scene};
pub use rir::{sabine_absorption, simulate_rir, simulate_rir_with_absorption};
pub use scene::sample_scene;
pub use source::{synth_noise, synth_speech};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_speed_of_sound() -> f64 {
    343.0
}

/// Shoebox room: `length` along x, `width` along y, `height` along z, all in
/// meters; `t60` is the target reverberation time in seconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub t60: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
}

impl RoomSpec {
    pub fn new(length: f64, width: f64, height: f64, t60: f64) -> Self {
        RoomSpec { length, width, height, t60, speed_of_sound: default_speed_of_sound() }
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.length, self.width, self.height]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(Error::invalid("room dimensions must be positive"));
        }
        if !(self.t60 > 0.0 && self.t60.is_finite()) {
            return Err(Error::invalid("t60 must be positive and finite"));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::invalid("speed of sound must be positive"));
        }
        Ok(())
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        p[0] > 0.0
            && p[0] < self.length
            && p[1] > 0.0
            && p[1] < self.width
            && p[2] > 0.0
            && p[2] < self.height
    }
}

/// One simulated acoustic scene; fully determined by `seed` plus the sampling
/// constraints, and serialized verbatim into dataset manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub room: RoomSpec,
    pub source_pos: [f64; 3],
    pub mic_pos: Vec<[f64; 3]>,
    pub noise_pos: Vec<[f64; 3]>,
    pub snr_db: f64,
    pub seed: u64,
}

impl Scene {
    pub fn n_mics(&self) -> usize {
        self.mic_pos.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        if self.mic_pos.is_empty() {
            return Err(Error::invalid("scene needs at least one microphone"));
        }
        if self.noise_pos.is_empty() {
            return Err(Error::invalid("scene needs at least one noise source"));
        }
        for &p in std::iter::once(&self.source_pos)
            .chain(self.mic_pos.iter())
            .chain(self.noise_pos.iter())
        {
            if !self.room.contains(p) {
                return Err(Error::invalid(format!(
                    "position ({:.2}, {:.2}, {:.2}) lies outside the room",
                    p[0], p[1], p[2]
                )));
            }
        }
        Ok(())
    }
}

/// Ranges the scene sampler draws from. Defaults follow the simulation
/// protocol the engine targets: rooms 5-10 m by 5-10 m by 3-4 m, T60 0.1-0.5 s,
/// SNR -5..15 dB, 1-3 noise sources, everything at least 0.5 m from a wall.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConstraints {
    pub mics: usize,
    pub length_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub t60_range: [f64; 2],
    pub snr_range_db: [f64; 2],
    pub noise_count: [usize; 2],
    pub wall_margin: f64,
}

impl Default for SceneConstraints {
    fn default() -> Self {
        SceneConstraints {
            mics: 6,
            length_range: [5.0, 10.0],
            width_range: [5.0, 10.0],
            height_range: [3.0, 4.0],
            t60_range: [0.1, 0.5],
            snr_range_db: [-5.0, 15.0],
            noise_count: [1, 3],
            wall_margin: 0.5,
        }
    }
}

impl SceneConstraints {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if self.mics == 0 {
            return Err(Error::invalid("need at least one microphone"));
        }
        if !(ordered(self.length_range)
            && ordered(self.width_range)
            && ordered(self.height_range)
            && ordered(self.t60_range)
            && ordered(self.snr_range_db))
        {
            return Err(Error::invalid("constraint ranges must be ordered and finite"));
        }
        if self.t60_range[0] <= 0.0 {
            return Err(Error::invalid("t60 range must be positive"));
        }
        if self.noise_count[0] < 1 || self.noise_count[0] > self.noise_count[1] {
            return Err(Error::invalid("noise count range must be ordered and at least 1"));
        }
        if self.wall_margin < 0.0
            || 2.0 * self.wall_margin >= self.length_range[0].min(self.width_range[0]).min(self.height_range[0])
        {
            return Err(Error::invalid("wall margin leaves no interior to place anything in"));
        }
        Ok(())
    }
}

/// A mixed scene with its exact decomposition: `noisy[c][i]` is bit-for-bit
/// `reverberant_clean[c][i] + noise_sum[c][i]`. `rirs[c]` is the
/// source-to-microphone impulse response of channel `c`.
#[derive(Debug, Clone)]
pub struct MultichannelRecording {
    pub sample_rate: u32,
    pub noisy: Vec<Vec<f32>>,
    pub reverberant_clean: Vec<Vec<f32>>,
    pub noise_sum: Vec<Vec<f32>>,
    pub rirs: Vec<Vec<f64>>,
    pub scene: Scene,
}

impl MultichannelRecording {
    pub fn n_channels(&self) -> usize {
        self.noisy.len()
    }

    pub fn len(&self) -> usize {
        self.noisy.first().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
