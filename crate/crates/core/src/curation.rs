//! Manifest curation: silence filtering and scorer-threshold filtering with
//! per-record provenance.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Kept,
    Dropped,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub duration_s: f64,
    /// Clip location relative to the manifest root.
    pub media_ref: String,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<String>,
}

impl ClipRecord {
    pub fn pending(id: impl Into<String>, duration_s: f64, media_ref: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            duration_s,
            media_ref: media_ref.into(),
            scores: BTreeMap::new(),
            status: Status::Pending,
            drop_reason: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Manifest("record with empty id".into()));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::Manifest(format!(
                "record {}: duration_s must be positive",
                self.id
            )));
        }
        if self.status == Status::Dropped && self.drop_reason.is_none() {
            return Err(Error::Manifest(format!(
                "record {}: dropped without drop_reason",
                self.id
            )));
        }
        Ok(())
    }

    pub fn is_dropped(&self) -> bool {
        self.status == Status::Dropped
    }

    fn drop_with(&mut self, reason: String) {
        self.status = Status::Dropped;
        self.drop_reason = Some(reason);
    }
}

pub fn validate_manifest(records: &[ClipRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Manifest(format!("duplicate id {:?}", r.id)));
        }
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn manifest_to_string(records: &[ClipRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SilenceSpec {
    pub rms_threshold: f64,
    pub min_active_fraction: f64,
}

impl Default for SilenceSpec {
    fn default() -> Self {
        Self {
            rms_threshold: 1e-3,
            min_active_fraction: 0.05,
        }
    }
}

/// Fraction of 100 ms windows whose RMS exceeds `rms_threshold`. A trailing
/// partial window counts as a window.
pub fn active_fraction(waveform: &[f64], sample_rate: u32, rms_threshold: f64) -> Result<f64> {
    if waveform.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    if sample_rate == 0 {
        return Err(Error::Input("sample rate must be positive".into()));
    }
    let win = ((sample_rate as f64 * 0.1).round() as usize).max(1);
    let mut active = 0usize;
    let mut total = 0usize;
    for w in waveform.chunks(win) {
        let rms = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        total += 1;
        if rms > rms_threshold {
            active += 1;
        }
    }
    Ok(active as f64 / total as f64)
}

/// Keep iff the active-window fraction exceeds `min_active_fraction`.
pub fn silence_filter(
    waveform: &[f64],
    sample_rate: u32,
    rms_threshold: f64,
    min_active_fraction: f64,
) -> Result<bool> {
    if !(rms_threshold > 0.0) || !(min_active_fraction > 0.0) {
        return Err(Error::Input("silence thresholds must be positive".into()));
    }
    Ok(active_fraction(waveform, sample_rate, rms_threshold)? > min_active_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    KeepAbove,
    KeepBelow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub scorer_id: String,
    pub threshold: f64,
    pub direction: Direction,
}

impl ScorerSpec {
    /// Scores equal to the threshold are kept.
    pub fn passes(&self, score: f64) -> bool {
        match self.direction {
            Direction::KeepAbove => score >= self.threshold,
            Direction::KeepBelow => score <= self.threshold,
        }
    }
}

/// Per-record scalar score.
pub trait Scorer: Sync {
    fn score(&self, record: &ClipRecord) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&ClipRecord) -> Result<f64> + Sync,
{
    fn score(&self, record: &ClipRecord) -> Result<f64> {
        self(record)
    }
}

/// Waveform lookup for the silence stage.
pub trait WaveformSource: Sync {
    fn waveform(&self, record: &ClipRecord) -> Result<(Vec<f64>, u32)>;
}

impl<F> WaveformSource for F
where
    F: Fn(&ClipRecord) -> Result<(Vec<f64>, u32)> + Sync,
{
    fn waveform(&self, record: &ClipRecord) -> Result<(Vec<f64>, u32)> {
        self(record)
    }
}

/// Score every record and record the score. Among records not yet dropped,
/// those failing the threshold are dropped with reason `<id>`, and scorer
/// failures with `scorer_error:<id>`. Earlier drops keep their first reason.
pub fn score_filter(manifest: &[ClipRecord], spec: &ScorerSpec, scorer: &dyn Scorer) -> Vec<ClipRecord> {
    let results: Vec<Result<f64>> = manifest.par_iter().map(|r| scorer.score(r)).collect();
    manifest
        .iter()
        .zip(results)
        .map(|(r, res)| {
            let mut r = r.clone();
            let score = res.ok().filter(|s| s.is_finite());
            if let Some(s) = score {
                r.scores.insert(spec.scorer_id.clone(), s);
            }
            if !r.is_dropped() {
                match score {
                    Some(s) if spec.passes(s) => r.status = Status::Kept,
                    Some(_) => r.drop_with(spec.scorer_id.clone()),
                    None => r.drop_with(format!("scorer_error:{}", spec.scorer_id)),
                }
            }
            r
        })
        .collect()
}

fn silence_stage(manifest: &[ClipRecord], spec: &SilenceSpec, source: &dyn WaveformSource) -> Vec<ClipRecord> {
    let results: Vec<Option<Result<bool>>> = manifest
        .par_iter()
        .map(|r| {
            (!r.is_dropped()).then(|| {
                let (w, sr) = source.waveform(r)?;
                silence_filter(&w, sr, spec.rms_threshold, spec.min_active_fraction)
            })
        })
        .collect();
    manifest
        .iter()
        .zip(results)
        .map(|(r, res)| {
            let mut r = r.clone();
            match res {
                None => {}
                Some(Ok(true)) => r.status = Status::Kept,
                Some(Ok(false)) => r.drop_with("silence".into()),
                Some(Err(_)) => r.drop_with("silence_error".into()),
            }
            r
        })
        .collect()
}

pub enum Stage<'a> {
    Silence {
        spec: SilenceSpec,
        source: &'a dyn WaveformSource,
    },
    Score {
        spec: ScorerSpec,
        scorer: &'a dyn Scorer,
    },
}

impl Stage<'_> {
    pub fn name(&self) -> String {
        match self {
            Stage::Silence { .. } => "silence".into(),
            Stage::Score { spec, .. } => format!("score:{}", spec.scorer_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    /// Records dropped by this stage.
    pub dropped: usize,
    /// Records not dropped after this stage.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub input: usize,
    /// Records already dropped on input.
    pub previously_dropped: usize,
    pub stages: Vec<StageSummary>,
    pub kept: usize,
    pub dropped: usize,
}

/// Apply `stages` in order. Dropped records are never revisited.
pub fn curate(manifest: &[ClipRecord], stages: &[Stage<'_>]) -> Result<(Vec<ClipRecord>, CurationSummary)> {
    validate_manifest(manifest)?;
    let previously_dropped = manifest.iter().filter(|r| r.is_dropped()).count();
    let mut current = manifest.to_vec();
    let mut summaries = Vec::with_capacity(stages.len());
    for stage in stages {
        let before = current.iter().filter(|r| r.is_dropped()).count();
        current = match stage {
            Stage::Silence { spec, source } => silence_stage(&current, spec, *source),
            Stage::Score { spec, scorer } => score_filter(&current, spec, *scorer),
        };
        let after = current.iter().filter(|r| r.is_dropped()).count();
        summaries.push(StageSummary {
            stage: stage.name(),
            dropped: after - before,
            remaining: current.len() - after,
        });
    }
    let dropped = current.iter().filter(|r| r.is_dropped()).count();
    let summary = CurationSummary {
        input: manifest.len(),
        previously_dropped,
        stages: summaries,
        kept: current.len() - dropped,
        dropped,
    };
    Ok((current, summary))
}
