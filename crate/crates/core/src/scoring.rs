//! Per-image OOD scores from the discriminator.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LoadOptions, Manifest, Scan};
use crate::model::PatchDiscriminator;
use crate::nn::sigmoid;
use crate::patching::{sample_patches, PatchBatch, DEFAULT_MARGIN};
use crate::rng;

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_CYCLES: usize = 5;
/// Largest `k` accepted without an explicit override.
pub const MAX_K: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub value: f64,
    pub scan_id: String,
    pub k_patches: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub k: usize,
    pub margin: f64,
    /// Allow `k` above [`MAX_K`].
    pub force_k: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            k: DEFAULT_K,
            margin: DEFAULT_MARGIN,
            force_k: false,
        }
    }
}

impl ScoreOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::BatchTooSmall(self.k));
        }
        if self.k > MAX_K && !self.force_k {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds {MAX_K}; force it explicitly to proceed",
                self.k
            )));
        }
        Ok(())
    }
}

/// `1 - sigmoid(logit)` per patch; the batch is evaluated jointly.
pub fn patch_ood_scores(batch: &PatchBatch, model: &dyn PatchDiscriminator) -> Result<Vec<f64>> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    if batch.patch_size() != model.patch_size() {
        return Err(Error::Shape(format!(
            "patches are {0}x{0}, discriminator expects {1}x{1}",
            batch.patch_size(),
            model.patch_size()
        )));
    }
    let out = model.discriminate_patches(batch.data(), batch.len())?;
    Ok(out.logits.iter().map(|&l| 1.0 - sigmoid(f64::from(l))).collect())
}

pub fn score_image(scan: &Scan, model: &dyn PatchDiscriminator, opts: &ScoreOptions, rng_seed: u64) -> Result<OodScore> {
    opts.validate()?;
    let batch = sample_patches(scan, opts.k, model.patch_size(), opts.margin, rng_seed)?;
    let scores = patch_ood_scores(&batch, model)?;
    Ok(OodScore {
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        scan_id: scan.id().to_string(),
        k_patches: opts.k,
        rng_seed,
    })
}

/// Seed used for `scan_index` in `cycle`.
pub fn cycle_seed(rng_seed: u64, cycle: usize, scan_index: usize) -> u64 {
    rng::derive(rng_seed, &[cycle as u64, scan_index as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scan_id: String,
    pub group_key: String,
    pub cycle: usize,
    pub k: usize,
    pub score: f64,
}

/// Scores for a set of scans over several cycles, plus per-scan failures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub records: Vec<ScoreRecord>,
    pub failures: Vec<(String, String)>,
}

impl ScoreTable {
    pub const CSV_HEADER: &'static str = "scan_id,group_key,cycle,k,score";

    /// One list per cycle, in scan order.
    pub fn per_cycle(&self) -> Vec<Vec<f64>> {
        let cycles = self.records.iter().map(|r| r.cycle + 1).max().unwrap_or(0);
        let mut out = vec![Vec::new(); cycles];
        for r in &self.records {
            out[r.cycle].push(r.score);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", csv_field(&r.scan_id), csv_field(&r.group_key), r.cycle, r.k, r.score);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == Self::CSV_HEADER => {}
            _ => {
                return Err(Error::Report(format!("score table must start with `{}`", Self::CSV_HEADER)));
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f = split_csv(line);
            let bad = |m: &str| Error::Report(format!("line {}: {m}", i + 1));
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            records.push(ScoreRecord {
                scan_id: f[0].clone(),
                group_key: f[1].clone(),
                cycle: f[2].parse().map_err(|_| bad("cycle"))?,
                k: f[3].parse().map_err(|_| bad("k"))?,
                score: f[4].parse().map_err(|_| bad("score"))?,
            });
        }
        Ok(ScoreTable {
            records,
            failures: Vec::new(),
        })
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

/// Score in-memory scans for `cycles` cycles. Scans are scored in parallel;
/// each scan's patches stay in one batch. Per-scan errors are collected; if
/// every scan fails the result is `EmptyDataset`.
pub fn score_scans(
    scans: &[Scan],
    model: &dyn PatchDiscriminator,
    opts: &ScoreOptions,
    cycles: usize,
    rng_seed: u64,
) -> Result<ScoreTable> {
    opts.validate()?;
    if cycles == 0 {
        return Err(Error::InvalidArgument("cycles must be at least 1".into()));
    }
    let results: Vec<Result<Vec<f64>>> = scans
        .par_iter()
        .enumerate()
        .map(|(i, scan)| {
            (0..cycles)
                .map(|c| score_image(scan, model, opts, cycle_seed(rng_seed, c, i)).map(|s| s.value))
                .collect()
        })
        .collect();
    let mut table = ScoreTable::default();
    let mut per_scan = Vec::new();
    for (scan, r) in scans.iter().zip(results) {
        match r {
            Ok(v) => per_scan.push((scan, v)),
            Err(e) if e.is_internal() => return Err(e),
            Err(e) => {
                warn!("scoring {} failed: {e}", scan.id());
                table.failures.push((scan.id().to_string(), e.to_string()));
            }
        }
    }
    if per_scan.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {} scans failed to score{}",
            scans.len(),
            table.failures.first().map(|(_, e)| format!(" (first: {e})")).unwrap_or_default()
        )));
    }
    for c in 0..cycles {
        for (scan, v) in &per_scan {
            table.records.push(ScoreRecord {
                scan_id: scan.id().to_string(),
                group_key: scan.group_key.clone(),
                cycle: c,
                k: opts.k,
                score: v[c],
            });
        }
    }
    Ok(table)
}

/// Load and score every manifest entry. Load failures are collected like
/// scoring failures.
pub fn score_manifest(
    manifest: &Manifest,
    model: &dyn PatchDiscriminator,
    opts: &ScoreOptions,
    cycles: usize,
    rng_seed: u64,
    load: &LoadOptions,
) -> Result<ScoreTable> {
    let mut scans = Vec::new();
    let mut failures = Vec::new();
    for entry in manifest.entries() {
        match manifest.load_entry(entry, load) {
            Ok(s) => scans.push(s),
            Err(e) => {
                warn!("loading {} failed: {e}", entry.path);
                failures.push((entry.path.clone(), e.to_string()));
            }
        }
    }
    if scans.is_empty() {
        return Err(Error::EmptyDataset(format!("none of {} manifest entries loaded", manifest.len())));
    }
    let mut table = score_scans(&scans, model, opts, cycles, rng_seed)?;
    failures.extend(table.failures);
    table.failures = failures;
    Ok(table)
}
