//! Command-line front end.
//!
//! Flags are resolved into a [`RunConfig`] holding every effective parameter.
//! The resolved config is written next to the outputs and can be fed back
//! through `replay` to rerun the command.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{build_report, write_histogram_png, ProtocolConfig, DEFAULT_ITERATIONS, DEFAULT_TARGET_TPR};
use crate::experiment::{self, ExperimentConfig};
use crate::ingest::{build_manifest, split_manifest, GroupBy, LoadOptions, Manifest, ManifestEntry, DEFAULT_TRAIN_FRACTION};
use crate::model::ArchitectureConfig;
use crate::patching::DEFAULT_MARGIN;
use crate::persistence::{load_model, save_model, ArchiveSubset};
use crate::rng;
use crate::scoring::{score_manifest, ScoreOptions, ScoreTable, DEFAULT_CYCLES, DEFAULT_K};
use crate::shiftgen::{ShiftKind, ShiftSpec};
use crate::synth::{self, TextureSpec};
use crate::training::{train, LossWeights, StreamWeights, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "adverx", version, about = "Patch-based adversarial VAE discriminator for detecting covariate shift in X-ray scans")]
pub struct Cli {
    /// Global seed; falls back to ADVERX_SEED, then 0.
    #[arg(long, global = true, env = "ADVERX_SEED")]
    pub seed: Option<u64>,

    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "adverx-out")]
    pub output_dir: PathBuf,

    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a directory of scans into a manifest.
    Manifest(ManifestArgs),
    /// Generate a corpus of procedural textures.
    Synth(SynthArgs),
    /// Write shifted copies of a corpus.
    Shift(ShiftArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score the scans of a manifest.
    Score(ScoreArgs),
    /// Compare ID and OOD score tables.
    Eval(EvalArgs),
    /// Run the synthetic covariate-shift benchmark.
    Experiment(ExperimentArgs),
    /// Rerun a command from its resolved-config file.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GroupByArg {
    Directory,
    Metadata,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// Dataset root directory.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_enum, default_value = "directory")]
    pub group_by: GroupByArg,
    /// Also write train/test manifests split per image at this fraction.
    #[arg(long, value_parser = parse_fraction)]
    pub split: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// gaussian_noise, gaussian_blur, gamma or dose_sim.
    #[arg(long, value_parser = parse_shift_kind)]
    pub kind: ShiftKind,
    /// Noise sigma, blur sigma in pixels, gamma exponent or dose factor.
    #[arg(long, value_parser = parse_positive)]
    pub magnitude: f64,
    #[arg(long)]
    pub bit_depth: Option<u8>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batches_per_epoch: usize,
    /// Patches per batch; batch statistics need at least 2.
    #[arg(long, default_value_t = 64, value_parser = parse_batch_size)]
    pub k_patches: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr_g: f64,
    #[arg(long, default_value_t = 2e-4)]
    pub lr_d: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub beta_kl: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_recon: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_sample: f64,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    /// Draw each patch of a batch from a different scan.
    #[arg(long)]
    pub cross_scan: bool,
    /// Save a checkpoint every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Network sizes as a JSON file; defaults to the full architecture.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Use the small test architecture.
    #[arg(long, conflicts_with = "arch")]
    pub toy: bool,
    #[arg(long)]
    pub bit_depth: Option<u8>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Model archive.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Patches per image.
    #[arg(long, default_value_t = DEFAULT_K, value_parser = parse_batch_size)]
    pub k: usize,
    /// Allow k above 512.
    #[arg(long)]
    pub force_k: bool,
    #[arg(long, default_value_t = DEFAULT_CYCLES)]
    pub cycles: usize,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long)]
    pub bit_depth: Option<u8>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV of the in-distribution scans.
    #[arg(long)]
    pub id: PathBuf,
    /// Score CSVs of the OOD scans.
    #[arg(long, required = true, num_args = 1..)]
    pub ood: Vec<PathBuf>,
    /// ID groups; defaults to every group in the ID table.
    #[arg(long = "id-group")]
    pub id_groups: Vec<String>,
    /// OOD groups; defaults to every group in the OOD tables.
    #[arg(long = "ood-group")]
    pub ood_groups: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub n_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TARGET_TPR)]
    pub target_tpr: f64,
    /// Evaluate only records with this patch count.
    #[arg(long)]
    pub k: Option<usize>,
    /// Also draw a score histogram.
    #[arg(long)]
    pub histogram: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment settings as JSON; missing fields take the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tiny networks and textures, for checking the plumbing.
    #[arg(long, conflicts_with = "config")]
    pub smoke: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A resolved-config file written by an earlier run.
    pub config: PathBuf,
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} must lie strictly between 0 and 1"))
    }
}

fn parse_batch_size(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 2 {
        Ok(v)
    } else {
        Err("batch statistics need at least 2 patches".into())
    }
}

fn parse_shift_kind(s: &str) -> std::result::Result<ShiftKind, String> {
    ShiftKind::parse(s).ok_or_else(|| format!("unknown shift kind `{s}`; expected gaussian_noise, gaussian_blur, gamma or dose_sim"))
}

/// Every effective parameter of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub command: CommandConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum CommandConfig {
    Manifest {
        root: PathBuf,
        group_by: GroupBy,
        split: Option<f64>,
    },
    Synth {
        count: usize,
        texture: TextureSpec,
    },
    Shift {
        manifest: PathBuf,
        kind: ShiftKind,
        magnitude: f64,
        load: LoadOptions,
    },
    Train {
        manifest: PathBuf,
        architecture: ArchitectureConfig,
        train: TrainConfig,
        load: LoadOptions,
    },
    Score {
        model: PathBuf,
        manifest: PathBuf,
        options: ScoreOptions,
        cycles: usize,
        load: LoadOptions,
    },
    Eval {
        id_scores: PathBuf,
        ood_scores: Vec<PathBuf>,
        id_groups: Vec<String>,
        ood_groups: Vec<String>,
        n_iter: usize,
        target_tpr: f64,
        k: Option<usize>,
        histogram: bool,
    },
    Experiment {
        config: ExperimentConfig,
    },
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Resolve parsed flags into a run config. `Replay` reads the stored config
/// and only takes the output directory from the command line when given
/// explicitly.
pub fn resolve(cli: &Cli, output_dir_explicit: bool) -> Result<RunConfig> {
    let rng_seed = cli.seed.unwrap_or(0);
    let load = |bit_depth: Option<u8>| LoadOptions { bit_depth };
    let command = match &cli.command {
        Command::Replay(a) => {
            let mut run: RunConfig = read_json(&a.config)?;
            if output_dir_explicit {
                run.output_dir = absolute(&cli.output_dir);
            }
            return Ok(run);
        }
        Command::Manifest(a) => CommandConfig::Manifest {
            root: absolute(&a.root),
            group_by: match a.group_by {
                GroupByArg::Directory => GroupBy::Directory,
                GroupByArg::Metadata => GroupBy::MetadataTag,
            },
            split: a.split,
        },
        Command::Synth(a) => CommandConfig::Synth {
            count: a.count,
            texture: TextureSpec {
                size: a.size,
                ..TextureSpec::default()
            },
        },
        Command::Shift(a) => CommandConfig::Shift {
            manifest: absolute(&a.manifest),
            kind: a.kind,
            magnitude: a.magnitude,
            load: load(a.bit_depth),
        },
        Command::Train(a) => {
            let architecture = match (&a.arch, a.toy) {
                (Some(p), _) => read_json(p)?,
                (None, true) => ArchitectureConfig::toy(),
                (None, false) => ArchitectureConfig::default(),
            };
            CommandConfig::Train {
                manifest: absolute(&a.manifest),
                architecture,
                train: TrainConfig {
                    epochs: a.epochs,
                    batches_per_epoch: a.batches_per_epoch,
                    patches_per_batch: a.k_patches,
                    learning_rate_g: a.lr_g,
                    learning_rate_d: a.lr_d,
                    optimizer_betas: (a.beta1, a.beta2),
                    rng_seed,
                    loss_weights: LossWeights {
                        beta_kl: a.beta_kl,
                        lambda_adv_recon: a.lambda_recon,
                        lambda_adv_sample: a.lambda_sample,
                    },
                    stream_weights: StreamWeights::default(),
                    margin: a.margin,
                    cross_scan_batches: a.cross_scan,
                    checkpoint_every: a.checkpoint_every,
                },
                load: load(a.bit_depth),
            }
        }
        Command::Score(a) => CommandConfig::Score {
            model: absolute(&a.model),
            manifest: absolute(&a.manifest),
            options: ScoreOptions {
                k: a.k,
                margin: a.margin,
                force_k: a.force_k,
            },
            cycles: a.cycles,
            load: load(a.bit_depth),
        },
        Command::Eval(a) => CommandConfig::Eval {
            id_scores: absolute(&a.id),
            ood_scores: a.ood.iter().map(|p| absolute(p)).collect(),
            id_groups: a.id_groups.clone(),
            ood_groups: a.ood_groups.clone(),
            n_iter: a.n_iter,
            target_tpr: a.target_tpr,
            k: a.k,
            histogram: a.histogram,
        },
        Command::Experiment(a) => {
            let mut config = match (&a.config, a.smoke) {
                (Some(p), _) => {
                    // Overlay the file on the defaults so partial configs work.
                    let mut base = serde_json::to_value(ExperimentConfig::default())?;
                    let over: serde_json::Value = read_json(p)?;
                    merge(&mut base, over);
                    serde_json::from_value(base)?
                }
                (None, true) => ExperimentConfig::smoke(),
                (None, false) => ExperimentConfig::default(),
            };
            config.rng_seed = rng_seed;
            CommandConfig::Experiment { config }
        }
    };
    Ok(RunConfig {
        rng_seed,
        output_dir: absolute(&cli.output_dir),
        workers: cli.workers,
        command,
    })
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_resolved(run: &RunConfig) -> Result<()> {
    let dir = &run.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RESOLVED_CONFIG);
    fs::write(&p, serde_json::to_string_pretty(run)?).map_err(|e| Error::io(&p, e))
}

/// Write scans as 16-bit PNGs under `dir/<subdir>` and a manifest listing
/// them with their group keys.
fn write_corpus(scans: &[crate::ingest::Scan], dir: &Path, subdir: &str, manifest_name: &str) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(scans.len());
    for (i, s) in scans.iter().enumerate() {
        let rel = format!("{subdir}/{i:05}.png");
        s.write_png16(dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            group_key: s.group_key.clone(),
        });
    }
    let m = Manifest::new(dir, entries, 0, DEFAULT_TRAIN_FRACTION)?;
    m.write(dir.join(manifest_name))?;
    Ok(m)
}

/// Execute a resolved run, writing its config first.
pub fn execute(run: &RunConfig) -> Result<()> {
    write_resolved(run)?;
    let out = &run.output_dir;
    let seed = run.rng_seed;
    match &run.command {
        CommandConfig::Manifest { root, group_by, split } => {
            let mut m = build_manifest(root, *group_by)?;
            m.split_seed = seed;
            m.write(out.join("manifest.tsv"))?;
            info!("{} scans in {} groups", m.len(), m.groups().len());
            if let Some(f) = split {
                m.train_fraction = *f;
                let (tr, te) = split_manifest(&m, *f, seed)?;
                tr.write(out.join("train.tsv"))?;
                te.write(out.join("test.tsv"))?;
                info!("split {} train / {} test", tr.len(), te.len());
            }
        }
        CommandConfig::Synth { count, texture } => {
            let scans = synth::corpus(texture, *count, seed)?;
            write_corpus(&scans, out, "scans", "manifest.tsv")?;
            info!("wrote {count} textures");
        }
        CommandConfig::Shift {
            manifest,
            kind,
            magnitude,
            load,
        } => {
            let m = Manifest::read(manifest)?;
            if m.is_empty() {
                return Err(Error::EmptyDataset(format!("{} has no entries", manifest.display())));
            }
            let label = ShiftSpec::new(*kind, *magnitude, seed)?.label();
            let mut shifted = Vec::with_capacity(m.len());
            for (i, e) in m.entries().iter().enumerate() {
                let scan = m.load_entry(e, load)?;
                let spec = ShiftSpec::new(*kind, *magnitude, rng::derive(seed, &[i as u64]))?;
                let mut s = spec.apply(&scan)?;
                s.group_key = label.clone();
                shifted.push(s);
            }
            write_corpus(&shifted, out, &label, "manifest.tsv")?;
            info!("wrote {} scans shifted by {label}", shifted.len());
        }
        CommandConfig::Train {
            manifest,
            architecture,
            train: cfg,
            load,
        } => {
            let m = Manifest::read(manifest)?;
            let ckpt_dir = out.join("checkpoints");
            let mut hook = |model: &crate::model::AdverxModel<f32>, step: usize| -> Result<()> {
                if cfg.checkpoint_every > 0 && step < cfg.total_steps() {
                    save_model(model, ckpt_dir.join(format!("step_{step:06}.axr")), ArchiveSubset::Full)?;
                }
                Ok(())
            };
            let (model, history) = train(&m, architecture, cfg, load, Some(&mut hook))?;
            save_model(&model, out.join("model.axr"), ArchiveSubset::Full)?;
            let info = save_model(&model, out.join("discriminator.axr"), ArchiveSubset::DiscriminatorOnly)?;
            history.write_csv(out.join("history.csv"))?;
            info!("saved model; discriminator archive {} bytes", info.size_bytes);
        }
        CommandConfig::Score {
            model,
            manifest,
            options,
            cycles,
            load,
        } => {
            let model = load_model(model, None)?;
            let m = Manifest::read(manifest)?;
            let table = score_manifest(&m, &model, options, *cycles, seed, load)?;
            for (id, why) in &table.failures {
                warn!("{id}: {why}");
            }
            table.write_csv(out.join("scores.csv"))?;
            info!("{} scores written", table.records.len());
        }
        CommandConfig::Eval {
            id_scores,
            ood_scores,
            id_groups,
            ood_groups,
            n_iter,
            target_tpr,
            k,
            histogram,
        } => {
            let read = |p: &Path| -> Result<ScoreTable> {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ScoreTable::parse_csv(&text)
            };
            let id = read(id_scores)?;
            let mut table = id.clone();
            let mut ood_all = Vec::new();
            for p in ood_scores {
                let t = read(p)?;
                ood_all.extend(t.records.iter().map(|r| r.group_key.clone()));
                table.records.extend(t.records);
            }
            let pick = |given: &Vec<String>, found: Vec<String>| -> Vec<String> {
                if given.is_empty() {
                    let mut v = found;
                    v.sort();
                    v.dedup();
                    v
                } else {
                    given.clone()
                }
            };
            let id_groups = pick(id_groups, id.records.iter().map(|r| r.group_key.clone()).collect());
            let ood_groups: Vec<String> = pick(ood_groups, ood_all)
                .into_iter()
                .filter(|g| !id_groups.contains(g))
                .collect();
            if ood_groups.is_empty() {
                return Err(Error::EmptyInput("no OOD group distinct from the ID groups".into()));
            }
            let protocol = ProtocolConfig {
                id_groups,
                ood_groups,
                n_iter: *n_iter,
                target_tpr: *target_tpr,
                rng_seed: seed,
                k: *k,
            };
            let report = build_report(&table, &protocol)?;
            report.write(out)?;
            print!("{}", report.to_text());
            if *histogram {
                let groups: Vec<(String, Vec<f64>)> = protocol
                    .id_groups
                    .iter()
                    .chain(&protocol.ood_groups)
                    .map(|g| {
                        let s = table
                            .records
                            .iter()
                            .filter(|r| &r.group_key == g && k.map_or(true, |k| r.k == k))
                            .map(|r| r.score)
                            .collect();
                        (g.clone(), s)
                    })
                    .collect();
                write_histogram_png(out.join("histogram.png"), &groups, 50)?;
            }
        }
        CommandConfig::Experiment { config } => {
            let r = experiment::run(config, Some(out))?;
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}

fn exit_code(e: &Error) -> i32 {
    if e.is_internal() {
        EXIT_INTERNAL
    } else {
        EXIT_USER
    }
}

/// Parse, resolve and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match <Cli as clap::CommandFactory>::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USER;
        }
    };
    let explicit = matches.value_source("output_dir") == Some(clap::parser::ValueSource::CommandLine);
    init_logging(cli.verbose);
    if cli.workers > 0 {
        // Fails only if a pool already exists, e.g. when called twice in one
        // process; the existing pool is then used.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    let result = resolve(&cli, explicit).and_then(|r| {
        if r.workers > 0 && cli.workers == 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(r.workers).build_global();
        }
        execute(&r)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::DEFAULT_PATCH_SIZE;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("adverx").chain(args.iter().copied()))
    }

    #[test]
    fn batch_of_one_is_rejected_at_parse_time() {
        assert!(parse(&["train", "--manifest", "m.tsv", "--k-patches", "1"]).is_err());
        assert!(parse(&["train", "--manifest", "m.tsv", "--k-patches", "2"]).is_ok());
        assert!(parse(&["score", "--model", "a", "--manifest", "m", "--k", "1"]).is_err());
    }

    #[test]
    fn non_positive_magnitude_is_a_parse_error() {
        for m in ["0", "-0.1", "nan"] {
            assert!(parse(&["shift", "--manifest", "m", "--kind", "gaussian_noise", "--magnitude", m]).is_err());
        }
        assert!(parse(&["shift", "--manifest", "m", "--kind", "sharpen", "--magnitude", "1"]).is_err());
    }

    #[test]
    fn resolved_config_records_defaults() {
        let cli = parse(&["--seed", "9", "score", "--model", "a.axr", "--manifest", "m.tsv"]).unwrap();
        let run = resolve(&cli, false).unwrap();
        assert_eq!(run.rng_seed, 9);
        match &run.command {
            CommandConfig::Score { options, cycles, .. } => {
                assert_eq!(options.k, 64);
                assert_eq!(*cycles, 5);
                assert_eq!(options.margin, 0.2);
            }
            other => panic!("{other:?}"),
        }
        let json = serde_json::to_string(&run).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), run);
    }

    #[test]
    fn train_defaults_follow_the_protocol() {
        let cli = parse(&["train", "--manifest", "m.tsv"]).unwrap();
        match resolve(&cli, false).unwrap().command {
            CommandConfig::Train { train, architecture, .. } => {
                assert_eq!(train, TrainConfig::default());
                assert_eq!(architecture.patch_size, DEFAULT_PATCH_SIZE);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_experiment_config_overlays_defaults() {
        let mut base = serde_json::to_value(ExperimentConfig::default()).unwrap();
        merge(&mut base, serde_json::json!({"n_scans": 20, "train": {"epochs": 1}}));
        let c: ExperimentConfig = serde_json::from_value(base).unwrap();
        assert_eq!(c.n_scans, 20);
        assert_eq!(c.train.epochs, 1);
        assert_eq!(c.train.batches_per_epoch, 100);
    }
}
