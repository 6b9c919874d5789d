//! Synthetic covariate-shift benchmark.
//!
//! Procedural textures stand in for an acquisition setting. A model is
//! trained on part of them; the held-out textures are scored as they are and
//! after each shift at several magnitudes, and at several patch counts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{build_report, MetricPair, ProtocolConfig, DEFAULT_ITERATIONS, DEFAULT_TARGET_TPR};
use crate::ingest::Scan;
use crate::model::ArchitectureConfig;
use crate::patching::DEFAULT_MARGIN;
use crate::persistence::{save_model, ArchiveSubset};
use crate::rng;
use crate::scoring::{score_scans, ScoreOptions, ScoreTable, DEFAULT_K};
use crate::shiftgen::{ShiftKind, ShiftSpec};
use crate::synth::{corpus, TextureSpec};
use crate::training::{train_on_scans, StepMetrics, TrainConfig};

pub const ID_GROUP: &str = "id";

/// Magnitudes of one shift kind, ordered from mildest to strongest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftGrid {
    pub kind: ShiftKind,
    pub magnitudes: Vec<f64>,
    /// Index of the nominal magnitude.
    pub nominal: usize,
}

impl ShiftGrid {
    /// Half, nominal and double the deviation from the identity transform:
    /// linear for noise and blur, in log space for gamma and dose.
    pub fn around(kind: ShiftKind, nominal: f64) -> Self {
        let magnitudes = match kind {
            ShiftKind::GaussianNoise | ShiftKind::GaussianBlur => vec![nominal / 2.0, nominal, nominal * 2.0],
            ShiftKind::Gamma | ShiftKind::DoseSim => vec![nominal.sqrt(), nominal, nominal * nominal],
        };
        ShiftGrid {
            kind,
            magnitudes,
            nominal: 1,
        }
    }

    pub fn nominal_magnitude(&self) -> f64 {
        self.magnitudes[self.nominal]
    }
}

pub fn default_shift_grid() -> Vec<ShiftGrid> {
    vec![
        ShiftGrid::around(ShiftKind::GaussianNoise, 0.05),
        ShiftGrid::around(ShiftKind::GaussianBlur, 2.0),
        ShiftGrid::around(ShiftKind::Gamma, 1.5),
        ShiftGrid::around(ShiftKind::DoseSim, 0.25),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_scans: usize,
    pub texture: TextureSpec,
    /// The first `floor(n_scans * train_fraction)` textures train the model.
    pub train_fraction: f64,
    pub architecture: ArchitectureConfig,
    /// `rng_seed` is overridden by a seed derived from [`Self::rng_seed`].
    pub train: TrainConfig,
    pub shifts: Vec<ShiftGrid>,
    /// Patch count for the magnitude grid.
    pub k_eval: usize,
    /// Patch counts evaluated at each nominal magnitude.
    pub k_sweep: Vec<usize>,
    pub cycles: usize,
    pub n_iter: usize,
    pub target_tpr: f64,
    pub margin: f64,
    pub rng_seed: u64,
}

impl Default for ExperimentConfig {
    /// The desk-scale run: 1,500 steps of 16 patches fit a four hour CPU
    /// budget together with the evaluation.
    fn default() -> Self {
        ExperimentConfig {
            n_scans: 200,
            texture: TextureSpec::default(),
            train_fraction: 0.7,
            architecture: ArchitectureConfig::default(),
            train: TrainConfig {
                epochs: 15,
                batches_per_epoch: 100,
                patches_per_batch: 16,
                ..TrainConfig::default()
            },
            shifts: default_shift_grid(),
            k_eval: DEFAULT_K,
            k_sweep: vec![16, 32, 64, 128],
            cycles: 2,
            n_iter: DEFAULT_ITERATIONS,
            target_tpr: DEFAULT_TARGET_TPR,
            margin: DEFAULT_MARGIN,
            rng_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// A few-second configuration on toy networks and small textures.
    pub fn smoke() -> Self {
        ExperimentConfig {
            n_scans: 12,
            texture: TextureSpec {
                size: 64,
                bands: vec![(4.0, 0.12), (1.0, 0.05)],
                ..TextureSpec::default()
            },
            train_fraction: 0.5,
            architecture: ArchitectureConfig::toy(),
            train: TrainConfig {
                epochs: 1,
                batches_per_epoch: 10,
                patches_per_batch: 8,
                ..TrainConfig::default()
            },
            k_eval: 8,
            k_sweep: vec![4, 8],
            cycles: 1,
            n_iter: 3,
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.train.validate()?;
        let n_train = self.n_train();
        if n_train == 0 || n_train >= self.n_scans {
            return Err(Error::InvalidArgument(format!(
                "split of {} scans at {} leaves an empty side",
                self.n_scans, self.train_fraction
            )));
        }
        if self.cycles == 0 || self.n_iter == 0 {
            return Err(Error::InvalidArgument("cycles and n_iter must be at least 1".into()));
        }
        for g in &self.shifts {
            if g.nominal >= g.magnitudes.len() {
                return Err(Error::InvalidArgument(format!("{} grid has no nominal entry", g.kind)));
            }
            for &m in &g.magnitudes {
                ShiftSpec::new(g.kind, m, 0)?;
            }
        }
        for &k in self.k_sweep.iter().chain([&self.k_eval]) {
            ScoreOptions {
                k,
                margin: self.margin,
                force_k: false,
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        (self.n_scans as f64 * self.train_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub kind: ShiftKind,
    pub magnitude: f64,
    /// Position in the kind's grid, 0 being the mildest.
    pub level: usize,
    pub k: usize,
    pub auroc: f64,
    pub fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    /// Mean over shift kinds at their nominal magnitudes.
    pub mean: MetricPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub discriminator_params: usize,
    pub final_step: Option<StepMetrics>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub shifts: Vec<ShiftResult>,
    pub sweep: Vec<SweepPoint>,
}

impl ExperimentResults {
    pub fn get(&self, kind: ShiftKind, level: usize, k: usize) -> Option<&ShiftResult> {
        self.shifts
            .iter()
            .find(|r| r.kind == kind && r.level == level && r.k == k)
    }

    /// Results of one kind at `k`, mildest first.
    pub fn by_level(&self, kind: ShiftKind, k: usize) -> Vec<&ShiftResult> {
        let mut v: Vec<_> = self.shifts.iter().filter(|r| r.kind == kind && r.k == k).collect();
        v.sort_by_key(|r| r.level);
        v
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "train {} / test {} scans, {} steps x {} patches, train {:.0}s, eval {:.0}s\n",
            self.n_train,
            self.n_test,
            self.config.train.total_steps(),
            self.config.train.patches_per_batch,
            self.train_seconds,
            self.eval_seconds
        );
        s.push_str("kind            magnitude  level     k   AUROC   FPR95\n");
        for r in &self.shifts {
            s.push_str(&format!(
                "{:<15} {:>9.4} {:>6} {:>5} {:>7.4} {:>7.4}\n",
                r.kind.to_string(),
                r.magnitude,
                r.level,
                r.k,
                r.auroc,
                r.fpr95
            ));
        }
        s.push_str("k sweep (mean over kinds at nominal magnitude)\n");
        for p in &self.sweep {
            s.push_str(&format!("k={:<4} AUROC {:.4} FPR95 {:.4}\n", p.k, p.mean.auroc, p.mean.fpr95));
        }
        s
    }
}

fn shifted(scans: &[Scan], kind: ShiftKind, magnitude: f64, seed: u64) -> Result<Vec<Scan>> {
    scans
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = ShiftSpec::new(kind, magnitude, rng::derive(seed, &[i as u64]))?;
            let mut out = spec.apply(s)?;
            out.group_key = spec.label();
            Ok(out)
        })
        .collect()
}

/// Run the benchmark. With `out_dir`, the model, scores, training history
/// and results are written there.
pub fn run(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResults> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let seed = config.rng_seed;
    let mut scans = corpus(&config.texture, config.n_scans, rng::derive(seed, &[0]))?;
    let test: Vec<Scan> = scans
        .split_off(config.n_train())
        .into_iter()
        .map(|mut s| {
            s.group_key = ID_GROUP.into();
            s
        })
        .collect();
    let train_scans = scans;
    info!("{} training and {} test textures", train_scans.len(), test.len());

    let train_cfg = TrainConfig {
        rng_seed: rng::derive(seed, &[2]),
        margin: config.margin,
        ..config.train
    };
    let t0 = Instant::now();
    let (model, history) = train_on_scans(&train_scans, &config.architecture, &train_cfg, None)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    drop(train_scans);
    if let Some(dir) = out_dir {
        history.write_csv(dir.join("history.csv"))?;
        save_model(&model, dir.join("model.axr"), ArchiveSubset::Full)?;
    }

    let t1 = Instant::now();
    let mut ks: Vec<usize> = config.k_sweep.clone();
    ks.push(config.k_eval);
    ks.sort_unstable();
    ks.dedup();
    // Every set shares the score seed, so scan i and its shifted copies are
    // read at the same patch locations.
    let score_seed = rng::derive(seed, &[3]);
    let score = |set: &[Scan], k: usize, table: &mut ScoreTable| -> Result<()> {
        let opts = ScoreOptions {
            k,
            margin: config.margin,
            force_k: false,
        };
        let t = score_scans(set, &model, &opts, config.cycles, score_seed)?;
        if let Some((id, why)) = t.failures.first() {
            return Err(Error::Internal(format!("scoring {id} failed: {why}")));
        }
        table.records.extend(t.records);
        Ok(())
    };

    let mut table = ScoreTable::default();
    for &k in &ks {
        score(&test, k, &mut table)?;
    }
    let mut labels = Vec::new();
    for (gi, grid) in config.shifts.iter().enumerate() {
        for (li, &mag) in grid.magnitudes.iter().enumerate() {
            let set = shifted(&test, grid.kind, mag, rng::derive(seed, &[4, gi as u64, li as u64]))?;
            let set_ks: Vec<usize> = if li == grid.nominal { ks.clone() } else { vec![config.k_eval] };
            for &k in &set_ks {
                score(&set, k, &mut table)?;
            }
            info!("scored {} ({:.0}s)", set[0].group_key, t1.elapsed().as_secs_f64());
            labels.push((grid.kind, mag, li, set[0].group_key.clone(), set_ks));
        }
    }
    if let Some(dir) = out_dir {
        table.write_csv(dir.join("scores.csv"))?;
    }

    let mut shifts = Vec::new();
    for &k in &ks {
        let ood_groups: Vec<String> = labels
            .iter()
            .filter(|l| l.4.contains(&k))
            .map(|l| l.3.clone())
            .collect();
        let protocol = ProtocolConfig {
            id_groups: vec![ID_GROUP.into()],
            ood_groups,
            n_iter: config.n_iter,
            target_tpr: config.target_tpr,
            rng_seed: rng::derive(seed, &[5]),
            k: Some(k),
        };
        let report = build_report(&table, &protocol)?;
        for r in report.results {
            let l = labels.iter().find(|l| l.3 == r.ood_group).expect("label from this run");
            shifts.push(ShiftResult {
                kind: l.0,
                magnitude: l.1,
                level: l.2,
                k,
                auroc: r.auroc_mean,
                fpr95: r.fpr95_mean,
            });
        }
    }
    let sweep = ks
        .iter()
        .filter(|k| config.k_sweep.contains(k))
        .map(|&k| {
            let nominal: Vec<&ShiftResult> = config
                .shifts
                .iter()
                .filter_map(|g| shifts.iter().find(|r| r.kind == g.kind && r.level == g.nominal && r.k == k))
                .collect();
            let n = nominal.len().max(1) as f64;
            SweepPoint {
                k,
                mean: MetricPair {
                    auroc: nominal.iter().map(|r| r.auroc).sum::<f64>() / n,
                    fpr95: nominal.iter().map(|r| r.fpr95).sum::<f64>() / n,
                },
            }
        })
        .collect();

    let results = ExperimentResults {
        config: config.clone(),
        n_train: config.n_train(),
        n_test: test.len(),
        discriminator_params: model.parameter_count().discriminator,
        final_step: history.steps.last().copied(),
        train_seconds,
        eval_seconds: t1.elapsed().as_secs_f64(),
        shifts,
        sweep,
    };
    if let Some(dir) = out_dir {
        let p = dir.join("results.json");
        fs::write(&p, serde_json::to_string_pretty(&results)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(results)
}
