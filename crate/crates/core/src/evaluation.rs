//! AUROC / FPR95, the balanced resampling protocol and report tables.
//!
//! OOD is the positive class and a higher score means more OOD. Ties get
//! half credit in AUROC; a score at or above the threshold is flagged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::{csv_field, ScoreTable};

pub const DEFAULT_TARGET_TPR: f64 = 0.95;
pub const DEFAULT_ITERATIONS: usize = 10;

fn check_scores(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput(format!("{name} scores are empty")));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Numerical(format!("{name} scores contain NaN")));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered"));
    s
}

/// Mann-Whitney statistic `P(ood > id) + 0.5 P(ood = id)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let id = sorted(id_scores);
    // Twice the credit, kept integral until the final division.
    let mut twice: u128 = 0;
    for &o in ood_scores {
        let below = id.partition_point(|&v| v < o);
        let not_above = id.partition_point(|&v| v <= o);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * id.len() as u128 * ood_scores.len() as u128) as f64)
}

/// False-positive rate at the largest threshold whose true-positive rate
/// reaches `target_tpr`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!("target TPR {target_tpr} outside (0, 1]")));
    }
    let m = ood_scores.len();
    let mut ood = sorted(ood_scores);
    ood.reverse();
    // Fewest flagged OOD samples meeting the target; the threshold is the
    // smallest of them.
    let needed = (1..=m)
        .find(|&c| c as f64 / m as f64 >= target_tpr)
        .expect("c = m always meets a target <= 1");
    let t = ood[needed - 1];
    let fp = id_scores.iter().filter(|&&v| v >= t).count();
    Ok(fp as f64 / id_scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub auroc: f64,
    pub fpr95: f64,
}

/// Mean metrics over `n_iter` draws of `|id|` OOD scores without
/// replacement from the pool.
pub fn balanced_ood_eval(
    id_scores: &[f64],
    ood_pool_scores: &[f64],
    n_iter: usize,
    rng_seed: u64,
    target_tpr: f64,
) -> Result<MetricPair> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_pool_scores)?;
    if n_iter == 0 {
        return Err(Error::InvalidArgument("n_iter must be at least 1".into()));
    }
    let n = id_scores.len();
    if ood_pool_scores.len() < n {
        return Err(Error::InsufficientData(format!(
            "OOD pool has {} scores, fewer than the {n} ID scores",
            ood_pool_scores.len()
        )));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for it in 0..n_iter {
        let mut r = rng::stream(rng::derive(rng_seed, &[it as u64]));
        let draw: Vec<f64> = rand::seq::index::sample(&mut r, ood_pool_scores.len(), n)
            .into_iter()
            .map(|i| ood_pool_scores[i])
            .collect();
        a += auroc(id_scores, &draw)?;
        f += fpr_at_tpr(id_scores, &draw, target_tpr)?;
    }
    Ok(MetricPair {
        auroc: a / n_iter as f64,
        fpr95: f / n_iter as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Groups treated as in-distribution; each gets its own column.
    pub id_groups: Vec<String>,
    /// OOD groups; empty means every group that is not an ID group.
    pub ood_groups: Vec<String>,
    pub n_iter: usize,
    pub target_tpr: f64,
    pub rng_seed: u64,
    /// Restrict to records with this patch count; required when the tables
    /// mix several.
    pub k: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            id_groups: Vec::new(),
            ood_groups: Vec::new(),
            n_iter: DEFAULT_ITERATIONS,
            target_tpr: DEFAULT_TARGET_TPR,
            rng_seed: 0,
            k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub id_group: String,
    pub ood_group: String,
    pub auroc_mean: f64,
    pub fpr95_mean: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub n_iterations: usize,
    pub n_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub results: Vec<GroupResult>,
    /// Mean over all results.
    pub average: MetricPair,
}

/// Per-cycle score lists of one group, cycle-indexed.
fn group_cycles(table: &ScoreTable, group: &str, k: Option<usize>) -> Vec<Vec<f64>> {
    let mut by_cycle: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in table.records.iter().filter(|r| r.group_key == group && k.map_or(true, |k| r.k == k)) {
        by_cycle.entry(r.cycle).or_default().push(r.score);
    }
    by_cycle.into_values().collect()
}

/// Metrics per (ID group, OOD group), computed per cycle and per resampling
/// iteration and averaged over both.
pub fn build_report(table: &ScoreTable, protocol: &ProtocolConfig) -> Result<EvalReport> {
    let ks: BTreeSet<usize> = table.records.iter().map(|r| r.k).collect();
    if protocol.k.is_none() && ks.len() > 1 {
        return Err(Error::Report(format!("score tables mix k = {ks:?}; choose one")));
    }
    let groups: BTreeSet<&str> = table.records.iter().map(|r| r.group_key.as_str()).collect();
    if protocol.id_groups.is_empty() {
        return Err(Error::Report("no ID group given".into()));
    }
    for g in protocol.id_groups.iter().chain(&protocol.ood_groups) {
        if !groups.contains(g.as_str()) {
            return Err(Error::Report(format!("group `{g}` has no scores")));
        }
    }
    let mut results = Vec::new();
    for id_group in &protocol.id_groups {
        let ood_groups: Vec<String> = if protocol.ood_groups.is_empty() {
            groups
                .iter()
                .filter(|g| !protocol.id_groups.iter().any(|i| i == *g))
                .map(|g| g.to_string())
                .collect()
        } else {
            protocol.ood_groups.clone()
        };
        if ood_groups.is_empty() {
            return Err(Error::Report(format!("no OOD group to compare with `{id_group}`")));
        }
        let id = group_cycles(table, id_group, protocol.k);
        if id.is_empty() {
            return Err(Error::Report(format!("group `{id_group}` has no scores at k = {:?}", protocol.k)));
        }
        for ood_group in ood_groups {
            let ood = group_cycles(table, &ood_group, protocol.k);
            if ood.len() != id.len() {
                return Err(Error::Report(format!(
                    "`{id_group}` has {} cycles but `{ood_group}` has {}",
                    id.len(),
                    ood.len()
                )));
            }
            let (mut a, mut f) = (0.0, 0.0);
            for (c, (i, o)) in id.iter().zip(&ood).enumerate() {
                let seed = rng::derive(protocol.rng_seed, &[c as u64]);
                let m = balanced_ood_eval(i, o, protocol.n_iter, seed, protocol.target_tpr)?;
                a += m.auroc;
                f += m.fpr95;
            }
            results.push(GroupResult {
                id_group: id_group.clone(),
                ood_group,
                auroc_mean: a / id.len() as f64,
                fpr95_mean: f / id.len() as f64,
                n_id: id[0].len(),
                n_ood: ood[0].len(),
                n_iterations: protocol.n_iter,
                n_cycles: id.len(),
            });
        }
    }
    let n = results.len() as f64;
    let average = MetricPair {
        auroc: results.iter().map(|r| r.auroc_mean).sum::<f64>() / n,
        fpr95: results.iter().map(|r| r.fpr95_mean).sum::<f64>() / n,
    };
    Ok(EvalReport { results, average })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "id_group,ood_group,auroc,fpr95,n_id,n_ood,n_iterations,n_cycles";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.results {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                csv_field(&r.id_group),
                csv_field(&r.ood_group),
                r.auroc_mean,
                r.fpr95_mean,
                r.n_id,
                r.n_ood,
                r.n_iterations,
                r.n_cycles
            );
        }
        let _ = writeln!(s, "average,average,{},{},,,,", self.average.auroc, self.average.fpr95);
        s
    }

    /// Aligned table: one row per OOD group, one column per ID group, cells
    /// `AUROC/FPR95` in percent, plus an average column and row.
    pub fn to_text(&self) -> String {
        let mut id_groups: Vec<&str> = Vec::new();
        let mut ood_groups: Vec<&str> = Vec::new();
        for r in &self.results {
            if !id_groups.contains(&r.id_group.as_str()) {
                id_groups.push(&r.id_group);
            }
            if !ood_groups.contains(&r.ood_group.as_str()) {
                ood_groups.push(&r.ood_group);
            }
        }
        let cell = |a: f64, f: f64| format!("{:.1}/{:.1}", 100.0 * a, 100.0 * f);
        let mean_of = |rs: Vec<&GroupResult>| {
            let n = rs.len() as f64;
            (
                rs.iter().map(|r| r.auroc_mean).sum::<f64>() / n,
                rs.iter().map(|r| r.fpr95_mean).sum::<f64>() / n,
            )
        };
        let mut header = vec!["OOD \\ ID".to_string()];
        header.extend(id_groups.iter().map(|g| g.to_string()));
        header.push("Average AUROC↑/FPR95↓".to_string());
        let mut rows = vec![header];
        for o in &ood_groups {
            let mut row = vec![o.to_string()];
            for i in &id_groups {
                row.push(
                    self.results
                        .iter()
                        .find(|r| r.id_group == *i && r.ood_group == *o)
                        .map_or("-".to_string(), |r| cell(r.auroc_mean, r.fpr95_mean)),
                );
            }
            let (a, f) = mean_of(self.results.iter().filter(|r| r.ood_group == *o).collect());
            row.push(cell(a, f));
            rows.push(row);
        }
        let mut avg = vec!["Average AUROC↑/FPR95↓".to_string()];
        for i in &id_groups {
            let (a, f) = mean_of(self.results.iter().filter(|r| r.id_group == *i).collect());
            avg.push(cell(a, f));
        }
        avg.push(cell(self.average.auroc, self.average.fpr95));
        rows.push(avg);

        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (ri, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| {
                    let pad = w - v.chars().count();
                    if c == 0 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
            if ri == 0 || ri == rows.len() - 2 {
                s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
                s.push('\n');
            }
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.to_csv()), ("report.txt", self.to_text())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Overlaid per-group score histograms on `[0, 1]` as a PNG. Each group is
/// drawn as a translucent step outline normalized to its own peak.
pub fn write_histogram_png(path: impl AsRef<Path>, groups: &[(String, Vec<f64>)], bins: usize) -> Result<()> {
    if groups.is_empty() || bins == 0 {
        return Err(Error::InvalidArgument("histogram needs groups and bins".into()));
    }
    let (w, h) = (bins as u32 * 8, 240u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    for (gi, (_, scores)) in groups.iter().enumerate() {
        let mut counts = vec![0usize; bins];
        for &s in scores {
            let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let c = PALETTE[gi % PALETTE.len()];
        for (b, &n) in counts.iter().enumerate() {
            let bar = ((n as f64 / peak) * (h as f64 - 10.0)) as u32;
            for x in b as u32 * 8..(b as u32 + 1) * 8 {
                for y in h - bar..h {
                    let p = img.get_pixel_mut(x, y);
                    for ch in 0..3 {
                        p.0[ch] = ((u16::from(p.0[ch]) + u16::from(c[ch])) / 2) as u8;
                    }
                }
            }
        }
    }
    let path = path.as_ref();
    img.save(path)?;
    Ok(())
}
