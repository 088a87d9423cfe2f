//! Objective quality metrics and the batch evaluation harness.
//!
//! All comparisons target the reverberant clean reference channel, and
//! improvements are measured against the unprocessed reference-channel
//! capture, so an identity enhancer reports an improvement of exactly zero.

mod stoi;

pub use stoi::{resample, stoi};

use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dsp::{stft, DspConfig};
use crate::error::{Error, Result};
use crate::sim::{load_recording, ManifestEntry, MultichannelRecording};
use crate::util::parallel_map;

const CLAMP_DB: f64 = 60.0;

/// Scale-invariant signal-to-noise ratio in dB, clamped to [-60, 60].
/// The target component is the projection of `est` onto `reference` after
/// mean removal, so any positive rescaling of `est` leaves the score alone.
pub fn si_snr(est: &[f32], reference: &[f32]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "length mismatch: est {} vs reference {}",
            est.len(),
            reference.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::invalid("empty signals"));
    }
    let n = reference.len() as f64;
    let me = est.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mr = reference.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut rr = 0.0;
    let mut er = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let (e, r) = (e as f64 - me, r as f64 - mr);
        rr += r * r;
        er += e * r;
    }
    if rr <= 1e-30 {
        return Err(Error::invalid("silent reference"));
    }
    let alpha = er / rr;
    let p_target = alpha * alpha * rr;
    let mut p_err = 0.0;
    for (&e, &r) in est.iter().zip(reference) {
        let d = (e as f64 - me) - alpha * (r as f64 - mr);
        p_err += d * d;
    }
    if p_target <= 0.0 {
        return Ok(-CLAMP_DB);
    }
    if p_err <= 0.0 {
        return Ok(CLAMP_DB);
    }
    Ok((10.0 * (p_target / p_err).log10()).clamp(-CLAMP_DB, CLAMP_DB))
}

/// Log-spectral distance in dB: RMS over frequency of the log-magnitude
/// ratio, averaged over frames. Zero iff the magnitude spectra agree.
pub fn lsd(est: &[f32], reference: &[f32], cfg: &DspConfig) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::invalid("signals must be non-empty and equally long"));
    }
    let a = stft(est, cfg)?;
    let b = stft(reference, cfg)?;
    let floor = 1e-10;
    let mut total = 0.0;
    for t in 0..a.n_frames {
        let mut acc = 0.0;
        for f in 0..a.n_bins {
            let d = 20.0 * ((a.at(t, f).norm() + floor) / (b.at(t, f).norm() + floor)).log10();
            acc += d * d;
        }
        total += (acc / a.n_bins as f64).sqrt();
    }
    Ok(total / a.n_frames.max(1) as f64)
}

/// Per-utterance evaluation row.
#[derive(Debug, Clone, Serialize)]
pub struct UtteranceEval {
    pub id: String,
    pub n_channels: usize,
    pub si_snr_db: f64,
    pub si_snr_improvement_db: f64,
    pub stoi: f64,
    pub lsd_db: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalFailure {
    pub id: String,
    pub error: String,
}

/// Arithmetic means over the successful rows.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalSummary {
    pub count: usize,
    pub failed: usize,
    pub si_snr_db: f64,
    pub si_snr_improvement_db: f64,
    pub stoi: f64,
    pub lsd_db: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<UtteranceEval>,
    pub failures: Vec<EvalFailure>,
    pub summary: EvalSummary,
}

/// Runs `enhancer` over every manifest entry and scores the result against
/// the reverberant clean reference channel. Failing utterances are recorded
/// and skipped; the run itself only fails on an empty manifest. Rows keep
/// manifest order regardless of the parallel schedule.
pub fn evaluate<F>(entries: &[ManifestEntry], dir: &Path, enhancer: F) -> Result<EvalReport>
where
    F: Fn(&MultichannelRecording) -> Result<Vec<f32>> + Send + Sync,
{
    if entries.is_empty() {
        return Err(Error::invalid("manifest has no entries"));
    }
    let dir: PathBuf = dir.to_path_buf();
    let jobs: Vec<ManifestEntry> = entries.to_vec();
    let outcomes = parallel_map(jobs, |_, entry| {
        (entry.id.clone(), evaluate_one(&entry, &dir, &enhancer))
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(EvalFailure { id, error: e.to_string() }),
        }
    }
    let summary = summarize(&rows, failures.len());
    Ok(EvalReport { rows, failures, summary })
}

fn evaluate_one<F>(entry: &ManifestEntry, dir: &Path, enhancer: &F) -> Result<UtteranceEval>
where
    F: Fn(&MultichannelRecording) -> Result<Vec<f32>>,
{
    let rec = load_recording(entry, dir)?;
    let est = enhancer(&rec)?;
    let n = est
        .len()
        .min(rec.reverberant_clean[0].len())
        .min(rec.noisy[0].len());
    let est = &est[..n];
    let clean_ref = &rec.reverberant_clean[0][..n];
    let noisy_ref = &rec.noisy[0][..n];

    let si = si_snr(est, clean_ref)?;
    let si_in = si_snr(noisy_ref, clean_ref)?;
    let st = stoi(est, clean_ref, rec.sample_rate)?;
    let cfg = DspConfig { sample_rate: rec.sample_rate, ..DspConfig::default() };
    let ld = lsd(est, clean_ref, &cfg)?;
    Ok(UtteranceEval {
        id: entry.id.clone(),
        n_channels: rec.n_channels(),
        si_snr_db: si,
        si_snr_improvement_db: si - si_in,
        stoi: st,
        lsd_db: ld,
    })
}

fn summarize(rows: &[UtteranceEval], failed: usize) -> EvalSummary {
    let mut s = EvalSummary { count: rows.len(), failed, ..EvalSummary::default() };
    if rows.is_empty() {
        return s;
    }
    let n = rows.len() as f64;
    for r in rows {
        s.si_snr_db += r.si_snr_db / n;
        s.si_snr_improvement_db += r.si_snr_improvement_db / n;
        s.stoi += r.stoi / n;
        s.lsd_db += r.lsd_db / n;
    }
    s
}

/// Line-delimited report: one `utterance` record per row, one `failure`
/// record per skipped utterance, then a single `summary` record. Field names
/// are stable for downstream parsing.
pub fn write_report(report: &EvalReport, out: &mut impl Write) -> Result<()> {
    #[derive(Serialize)]
    struct Tagged<'a, T: Serialize> {
        record: &'a str,
        #[serde(flatten)]
        body: &'a T,
    }
    fn line<T: Serialize>(out: &mut impl Write, record: &str, body: &T) -> Result<()> {
        let s = serde_json::to_string(&Tagged { record, body })
            .map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(out, "{s}")?;
        Ok(())
    }
    for row in &report.rows {
        line(out, "utterance", row)?;
    }
    for f in &report.failures {
        line(out, "failure", f)?;
    }
    line(out, "summary", &report.summary)
}
