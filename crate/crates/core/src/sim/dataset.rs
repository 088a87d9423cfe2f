//! Dataset synthesis: per-utterance scenes, WAV sets, and a line-delimited
//! manifest.
//!
//! Every utterance derives an independent RNG stream from (master seed,
//! utterance index), so parallel and serial builds produce bit-identical
//! output, and a stored seed regenerates a dataset exactly. All three signal
//! groups are written per channel (noisy capture, reverberant clean, summed
//! noise): the clean and noise channels beyond the reference are what the
//! oracle beamformer and reference-switching augmentation consume.

use super::{
    mix_scene, sample_scene, synth_noise, synth_speech, MultichannelRecording, Scene,
    SceneConstraints,
};
use crate::audio::{read_wav, write_wav, SampleFormat, Wave};
use crate::error::{Error, Result};
use crate::util::parallel_map;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where utterance audio comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SourceSpec {
    /// Built-in deterministic generators (harmonic speech, tilted noise).
    Synthetic { seconds: f64 },
    /// Mono 16 kHz WAV pools; each utterance draws one clean file and one
    /// file per noise source, cropped to `seconds` at a random offset.
    WavDirs { clean_dir: PathBuf, noise_dir: PathBuf, seconds: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    pub count: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub constraints: SceneConstraints,
    pub source: SourceSpec,
}

/// One manifest line. Paths are relative to the manifest's directory;
/// index 0 of each list is the reference channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy: Vec<String>,
    pub clean: Vec<String>,
    pub noise: Vec<String>,
    pub scene: Scene,
}

#[derive(Debug)]
pub struct BuildReport {
    pub entries: Vec<ManifestEntry>,
    /// Utterances dropped with the reason, e.g. an unreadable source WAV.
    pub skipped: Vec<String>,
    pub manifest_path: PathBuf,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(
            &serde_json::to_string(e).map_err(|e| Error::Manifest(e.to_string()))?,
        );
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::Manifest(format!("{} line {}: {}", path.display(), ln + 1, e))
        })?;
        entries.push(e);
    }
    Ok(entries)
}

/// Reads one manifest entry back into memory. Paths are resolved against
/// `dir` (the manifest's directory); impulse responses are not stored on
/// disk, so `rirs` comes back empty.
pub fn load_recording(entry: &ManifestEntry, dir: &Path) -> Result<MultichannelRecording> {
    let mut rate = 0u32;
    let mut load_group = |paths: &[String]| -> Result<Vec<Vec<f32>>> {
        paths
            .iter()
            .map(|p| {
                let w = read_wav(&dir.join(p))?;
                if w.channels.len() != 1 {
                    return Err(Error::Manifest(format!("{p}: expected a mono file")));
                }
                if rate == 0 {
                    rate = w.sample_rate;
                } else if w.sample_rate != rate {
                    return Err(Error::Manifest(format!(
                        "{p}: sample rate {} disagrees with {rate}",
                        w.sample_rate
                    )));
                }
                Ok(w.channels.into_iter().next().unwrap())
            })
            .collect()
    };
    let noisy = load_group(&entry.noisy)?;
    let reverberant_clean = load_group(&entry.clean)?;
    let noise_sum = load_group(&entry.noise)?;
    let c = noisy.len();
    if c == 0 || reverberant_clean.len() != c || noise_sum.len() != c {
        return Err(Error::Manifest(format!(
            "{}: channel groups disagree ({} noisy, {} clean, {} noise)",
            entry.id,
            c,
            reverberant_clean.len(),
            noise_sum.len()
        )));
    }
    let len = noisy[0].len();
    let all = noisy.iter().chain(&reverberant_clean).chain(&noise_sum);
    if all.into_iter().any(|ch| ch.len() != len) {
        return Err(Error::Manifest(format!("{}: channel lengths disagree", entry.id)));
    }
    Ok(MultichannelRecording {
        sample_rate: rate,
        noisy,
        reverberant_clean,
        noise_sum,
        rirs: Vec::new(),
        scene: entry.scene.clone(),
    })
}

fn derive_seed(master: u64, idx: u64) -> u64 {
    // splitmix64 scramble keeps per-utterance streams decorrelated
    let mut z = master.wrapping_add((idx + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("wav"))
                == Some(true)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

/// Draw a mono 16 kHz clip of up to `want` samples from `pool`.
fn draw_clip(
    pool: &[PathBuf],
    want: usize,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let path = &pool[rng.gen_range(0..pool.len())];
    let wave = read_wav(path)?;
    if wave.sample_rate != sample_rate {
        return Err(Error::Audio(format!(
            "{}: sample rate {} (need {})",
            path.display(),
            wave.sample_rate,
            sample_rate
        )));
    }
    if wave.channels.len() != 1 {
        return Err(Error::Audio(format!(
            "{}: {} channels (need mono)",
            path.display(),
            wave.channels.len()
        )));
    }
    let ch = &wave.channels[0];
    if ch.is_empty() {
        return Err(Error::Audio(format!("{}: empty", path.display())));
    }
    if ch.len() <= want {
        return Ok(ch.clone());
    }
    let start = rng.gen_range(0..=ch.len() - want);
    Ok(ch[start..start + want].to_vec())
}

struct WavPools {
    clean: Vec<PathBuf>,
    noise: Vec<PathBuf>,
}

fn build_one(
    idx: usize,
    cfg: &BuildConfig,
    pools: &Option<WavPools>,
    out_dir: &Path,
) -> Result<ManifestEntry> {
    let utt_seed = derive_seed(cfg.seed, idx as u64);
    let scene = sample_scene(utt_seed, &cfg.constraints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
    rng.set_stream(1); // scene sampling used the default stream
    let (clean, noises): (Vec<f32>, Vec<Vec<f32>>) = match &cfg.source {
        SourceSpec::Synthetic { seconds } => {
            let clean = synth_speech(*seconds, cfg.sample_rate, &mut rng);
            let noises = scene
                .noise_pos
                .iter()
                .map(|_| synth_noise(*seconds, cfg.sample_rate, &mut rng))
                .collect();
            (clean, noises)
        }
        SourceSpec::WavDirs { seconds, .. } => {
            let pools = pools.as_ref().expect("pools listed before the build loop");
            let want = (seconds * cfg.sample_rate as f64).round() as usize;
            let clean = draw_clip(&pools.clean, want, cfg.sample_rate, &mut rng)?;
            let noises = scene
                .noise_pos
                .iter()
                .map(|_| draw_clip(&pools.noise, want, cfg.sample_rate, &mut rng))
                .collect::<Result<_>>()?;
            (clean, noises)
        }
    };
    let rec = mix_scene(&clean, &noises, &scene, cfg.sample_rate)?;

    let id = format!("utt{:05}", idx);
    let mut entry = ManifestEntry {
        id: id.clone(),
        noisy: Vec::new(),
        clean: Vec::new(),
        noise: Vec::new(),
        scene,
    };
    let groups: [(&str, &Vec<Vec<f32>>, &mut Vec<String>); 3] = [
        ("noisy", &rec.noisy, &mut entry.noisy),
        ("clean", &rec.reverberant_clean, &mut entry.clean),
        ("noise", &rec.noise_sum, &mut entry.noise),
    ];
    for (kind, chans, paths) in groups {
        for (c, ch) in chans.iter().enumerate() {
            let name = format!("{}_{}_ch{}.wav", id, kind, c);
            let wave = Wave { sample_rate: cfg.sample_rate, channels: vec![ch.clone()] };
            write_wav(&out_dir.join(&name), &wave, SampleFormat::Float32)?;
            paths.push(name);
        }
    }
    Ok(entry)
}

/// Generate `cfg.count` utterances into `out_dir` and write
/// `out_dir/manifest.jsonl`. Utterances whose sources cannot be read are
/// dropped and reported in the result, not fatal.
pub fn build_dataset(cfg: &BuildConfig, out_dir: &Path) -> Result<BuildReport> {
    if cfg.count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if cfg.sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    cfg.constraints.validate()?;
    let pools = match &cfg.source {
        SourceSpec::WavDirs { clean_dir, noise_dir, seconds } => {
            if *seconds <= 0.0 {
                return Err(Error::invalid("segment seconds must be positive"));
            }
            Some(WavPools { clean: list_wavs(clean_dir)?, noise: list_wavs(noise_dir)? })
        }
        SourceSpec::Synthetic { seconds } => {
            if *seconds <= 0.0 {
                return Err(Error::invalid("segment seconds must be positive"));
            }
            None
        }
    };
    std::fs::create_dir_all(out_dir)?;

    let results = parallel_map((0..cfg.count).collect(), |_, idx| {
        build_one(idx, cfg, &pools, out_dir)
    });
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => skipped.push(format!("utt{:05}: {}", idx, e)),
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&entries, &manifest_path)?;
    Ok(BuildReport { entries, skipped, manifest_path })
}
