//! Pipeline driver. Each subcommand is one stage reading and writing files
//! under a single experiment root, so a full run is a sequence of processes
//! with no shared in-process state:
//!
//! ```text
//! dac --out runs/a generate
//! dac --out runs/a train-erm
//! dac --out runs/a premask
//! dac --out runs/a retrain
//! dac --out runs/a evaluate
//! dac --out runs/a plot
//! ```
//!
//! Every stage directory carries a `resolved_config.json` with the full
//! effective configuration and the hashes of every artifact the stage
//! consumed, so a run can be audited and reproduced from its directory
//! alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dac::attribution::{save_heatmap_png, xgradcam_batch};
use dac::backbone::{ModelShape, SplitModel};
use dac::baselines::{retrain_group_balanced, retrain_plain, PlainConfig};
use dac::composer::compose;
use dac::error::DacError;
use dac::evaluation::{
    group_loss_distribution, group_metrics, quantile_attention_stats, GroupMetrics,
};
use dac::kneedle::{find_elbow, CurvePoints};
use dac::masking::{adaptive_mask, MaskCache};
use dac::plot::{attention_chart, loss_distribution_chart, sweep_chart, write_svg};
use dac::synthdata::{generate, images_tensor, read_manifest, Dataset, GenConfig, CHANNELS};
use dac::trainer::{
    compute_loss_cache, dac_retrain, split_mean_fill, train_erm, DacConfig, EpochLog, ErmConfig,
    LossCache, RetrainOutcome, SelectionMode,
};
use dac::Result;

#[derive(Parser)]
#[command(name = "dac", version, about = "Spurious-correlation repair pipeline")]
struct Cli {
    /// JSON config file; missing sections fall back to defaults, and
    /// command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of every stage (dataset, training, retraining).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment root directory; each stage writes one subdirectory.
    #[arg(long, global = true, default_value = "dac-run")]
    out: PathBuf,

    /// Replace a stage directory that already exists.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into <out>/dataset.
    Generate,
    /// Train the base model; writes checkpoint, epoch logs, and the
    /// per-example loss cache into <out>/erm.
    TrainErm,
    /// Precompute one attribution-guided mask per training image into
    /// <out>/masks.
    Premask {
        /// Probe grid step, e.g. 0.2 probes proportions 0, 0.2, 0.4, ...
        #[arg(long)]
        grid: Option<f64>,
        /// Largest probed proportion.
        #[arg(long)]
        grid_max: Option<f64>,
        /// Knee detector sensitivity.
        #[arg(long)]
        sensitivity: Option<f64>,
    },
    /// Retrain the classifier head against the frozen features, mixing
    /// composed counterfactuals into the loss (or run a baseline retrain).
    Retrain {
        /// Composition loss weight.
        #[arg(long)]
        alpha: Option<f64>,
        /// Portion of each batch selected as donors.
        #[arg(long)]
        q: Option<f64>,
        /// Trust masks as causal estimates (true) or invert them (false).
        #[arg(long)]
        causal_flag: Option<bool>,
        /// Select correctly classified examples instead of a loss quantile.
        #[arg(long)]
        dac_c: bool,
        /// Skip composition and run a reference retrain instead.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Stage directory name; defaults to retrain, retrain-plain, or
        /// retrain-balanced depending on the mode.
        #[arg(long)]
        name: Option<String>,
    },
    /// Retrain every (alpha, q, causal flag) cell of the configured grid
    /// and keep the best by worst-group validation accuracy.
    Sweep,
    /// Group metrics for every trained checkpoint under <out>, as JSON and
    /// CSV.
    Evaluate,
    /// Diagnostic charts (attention by loss quartile, group mass by loss
    /// quartile, sweep curve) and attribution heatmaps.
    Plot {
        /// How many validation images get a heatmap PNG.
        #[arg(long, default_value_t = 4)]
        heatmaps: usize,
    },
    /// Read a two-column CSV of (x, y) points and print the detected knee.
    Knee {
        csv: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sensitivity: f64,
        /// Expect a flat-then-steep (convex) curve like a loss probe;
        /// without this flag the curve is read as steep-then-flat (concave).
        #[arg(long)]
        rising: bool,
    },
    /// Compose two training images with their cached masks and write the
    /// panels (donor, partner, composition) side by side as one PNG.
    Triptych {
        #[arg(long)]
        donor_i: String,
        #[arg(long)]
        donor_j: String,
        /// Invert both masks before composing.
        #[arg(long)]
        invert: bool,
        /// Output PNG path.
        #[arg(long)]
        png: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Cross entropy only, same optimizer and schedule.
    Plain,
    /// Cross entropy on a ground-truth group-balanced subsample.
    Balanced,
}

/// Grid of retraining cells tried by the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SweepSpec {
    alphas: Vec<f64>,
    qs: Vec<f64>,
    causal_flags: Vec<bool>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            alphas: (1..=10).map(f64::from).collect(),
            qs: vec![0.2, 0.4, 0.5, 0.6, 0.8, 1.0],
            causal_flags: vec![true, false],
        }
    }
}

/// The whole experiment configuration. Every section has defaults, so an
/// empty config file is valid.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    dataset: GenConfig,
    erm: ErmConfig,
    dac: DacConfig,
    sweep: SweepSpec,
}

/// Audit record written into every stage directory.
#[derive(Serialize)]
struct ResolvedConfig<'a> {
    command: String,
    config: &'a RunConfig,
    seed_override: Option<u64>,
    deterministic: bool,
    /// Name to content hash of every artifact the stage read.
    inputs: BTreeMap<String, String>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// 2 config error, 3 stale or corrupt artifact, 4 training divergence.
fn exit_code(e: &DacError) -> i32 {
    match e {
        DacError::InvalidInput(_) | DacError::Io(_) | DacError::Json(_) => 2,
        DacError::Integrity { .. } | DacError::Stale { .. } => 3,
        DacError::Diverged { .. } => 4,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
        config.erm.seed = seed;
        config.dac.seed = seed;
    }
    Ok(config)
}

/// Claims a stage directory: refuses to touch an existing one unless
/// --force, in which case the old directory is removed entirely.
fn claim_stage_dir(root: &Path, name: &str, force: bool) -> Result<PathBuf> {
    let dir = root.join(name);
    if dir.exists() {
        if !force {
            return Err(DacError::invalid(format!(
                "{} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Claims a stage directory up front (so an existing one is refused before
/// any compute), runs the stage body, and removes the directory again if
/// the body fails so a plain retry is possible.
fn in_stage_dir<T>(
    root: &Path,
    name: &str,
    force: bool,
    body: impl FnOnce(&Path) -> Result<T>,
) -> Result<T> {
    let dir = claim_stage_dir(root, name, force)?;
    match body(&dir) {
        Ok(value) => Ok(value),
        Err(e) => {
            let _ = std::fs::remove_dir_all(&dir);
            Err(e)
        }
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_resolved_config(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    cli: &Cli,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    let record = ResolvedConfig {
        command: command.into(),
        config,
        seed_override: cli.seed,
        deterministic: dac::deterministic_mode(),
        inputs,
    };
    std::fs::write(
        dir.join("resolved_config.json"),
        serde_json::to_vec_pretty(&record)?,
    )?;
    Ok(())
}

fn write_jsonl(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn dataset_dir(root: &Path) -> PathBuf {
    root.join("dataset")
}

fn load_dataset(root: &Path) -> Result<Dataset> {
    read_manifest(&dataset_dir(root))
}

fn erm_checkpoint_path(root: &Path) -> PathBuf {
    root.join("erm").join("checkpoint.bin")
}

fn load_erm(root: &Path) -> Result<SplitModel> {
    SplitModel::load_checkpoint(&erm_checkpoint_path(root))
}

fn model_shape(config: &GenConfig) -> ModelShape {
    ModelShape {
        channels_in: CHANNELS,
        height: config.height,
        width: config.width,
        classes: 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cli, &config),
        Command::TrainErm => cmd_train_erm(&cli, &config),
        Command::Premask { grid, grid_max, sensitivity } => {
            cmd_premask(&cli, config, *grid, *grid_max, *sensitivity)
        }
        Command::Retrain { alpha, q, causal_flag, dac_c, baseline, name } => cmd_retrain(
            &cli,
            config,
            RetrainArgs {
                alpha: *alpha,
                q: *q,
                causal_flag: *causal_flag,
                dac_c: *dac_c,
                baseline: *baseline,
                name: name.clone(),
            },
        ),
        Command::Sweep => cmd_sweep(&cli, &config),
        Command::Evaluate => cmd_evaluate(&cli, &config),
        Command::Plot { heatmaps } => cmd_plot(&cli, &config, *heatmaps),
        Command::Knee { csv, sensitivity, rising } => cmd_knee(csv, *sensitivity, *rising),
        Command::Triptych { donor_i, donor_j, invert, png } => {
            cmd_triptych(&cli, donor_i, donor_j, *invert, png)
        }
    }
}

fn cmd_generate(cli: &Cli, config: &RunConfig) -> Result<()> {
    config.dataset.validate()?;
    in_stage_dir(&cli.out, "dataset", cli.force, |dir| {
        let dataset = generate(&config.dataset)?;
        let manifest = dac::synthdata::write_manifest(&dataset, dir)?;
        write_resolved_config(dir, "generate", config, cli, BTreeMap::new())?;
        println!(
            "dataset: {} train / {} val / {} test, content {}",
            dataset.train.len(),
            dataset.val.len(),
            dataset.test.len(),
            &manifest.content_hash[..12]
        );
        Ok(())
    })
}

fn cmd_train_erm(cli: &Cli, config: &RunConfig) -> Result<()> {
    config.erm.validate()?;
    let dataset = load_dataset(&cli.out)?;
    let manifest_hash = file_sha256(&dataset_dir(&cli.out).join("manifest.json"))?;
    in_stage_dir(&cli.out, "erm", cli.force, |dir| {
        let mut model = SplitModel::new(model_shape(&dataset.config), config.erm.seed)?;
        let logs = train_erm(&mut model, &dataset.train, &dataset.val, &config.erm)?;
        model.save_checkpoint(&dir.join("checkpoint.bin"))?;
        write_jsonl(&dir.join("train_log.jsonl"), &logs)?;
        let cache = compute_loss_cache(&model, &dataset.train)?;
        cache.write(&dir.join("loss_cache.json"))?;
        let inputs = BTreeMap::from([("dataset_manifest".to_string(), manifest_hash.clone())]);
        write_resolved_config(dir, "train-erm", config, cli, inputs)?;
        let last = logs.last().expect("at least one epoch");
        println!(
            "erm: {} epochs, final loss {:.4}, val worst {:.3} avg {:.3}, checkpoint {}",
            logs.len(),
            last.l_ce,
            last.worst_group_val,
            last.avg_val,
            &model.weight_hash()[..12]
        );
        Ok(())
    })
}

fn cmd_premask(
    cli: &Cli,
    mut config: RunConfig,
    grid: Option<f64>,
    grid_max: Option<f64>,
    sensitivity: Option<f64>,
) -> Result<()> {
    if let Some(step) = grid {
        config.dac.grid.step = step;
    }
    if let Some(max) = grid_max {
        config.dac.grid.max = max;
    }
    if let Some(s) = sensitivity {
        config.dac.sensitivity = s;
    }
    let grid_points = config.dac.grid.points()?;
    let dataset = load_dataset(&cli.out)?;
    let model = load_erm(&cli.out)?;
    let manifest_hash = file_sha256(&dataset_dir(&cli.out).join("manifest.json"))?;
    in_stage_dir(&cli.out, "masks", cli.force, |dir| {
        let fill = split_mean_fill(&dataset.train)?;
        let mut entries = Vec::with_capacity(dataset.train.len());
        let mut knees = 0usize;
        for chunk in dataset.train.chunks(256) {
            let images = images_tensor(chunk);
            let ids: Vec<String> = chunk.iter().map(|e| e.id.clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let maps = xgradcam_batch(&model, &images, &ids, &targets)?;
            for (ex, map) in chunk.iter().zip(maps) {
                let result = adaptive_mask(
                    &model,
                    &ex.image,
                    ex.label,
                    &map,
                    &grid_points,
                    config.dac.sensitivity,
                    &fill,
                )?;
                knees += usize::from(result.knee_found);
                entries.push((ex.id.clone(), result));
            }
        }
        MaskCache::write(
            dir,
            &model.weight_hash(),
            &grid_points,
            config.dac.sensitivity,
            &fill,
            &entries,
        )?;
        let inputs = BTreeMap::from([
            ("dataset_manifest".to_string(), manifest_hash.clone()),
            ("erm_checkpoint".to_string(), model.weight_hash()),
        ]);
        write_resolved_config(dir, "premask", &config, cli, inputs)?;
        println!(
            "masks: {} images, knee found on {} ({:.1}%)",
            entries.len(),
            knees,
            100.0 * knees as f64 / entries.len() as f64
        );
        Ok(())
    })
}

struct RetrainArgs {
    alpha: Option<f64>,
    q: Option<f64>,
    causal_flag: Option<bool>,
    dac_c: bool,
    baseline: Option<Baseline>,
    name: Option<String>,
}

/// Final model quality on the held-out splits, written next to each
/// retrained checkpoint.
#[derive(Serialize, Deserialize)]
struct FinalMetrics {
    val: GroupMetrics,
    test: GroupMetrics,
}

fn evaluate_final(model: &SplitModel, dataset: &Dataset) -> Result<FinalMetrics> {
    Ok(FinalMetrics {
        val: group_metrics(model, &dataset.val)?,
        test: group_metrics(model, &dataset.test)?,
    })
}

fn save_retrain_outputs(
    dir: &Path,
    outcome: &RetrainOutcome,
    metrics: &FinalMetrics,
) -> Result<()> {
    outcome.model.save_checkpoint(&dir.join("checkpoint.bin"))?;
    write_jsonl(&dir.join("train_log.jsonl"), &outcome.logs)?;
    if !outcome.selections.is_empty() {
        std::fs::write(
            dir.join("selections.json"),
            serde_json::to_vec(&outcome.selections)?,
        )?;
    }
    std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(metrics)?)?;
    Ok(())
}

fn cmd_retrain(cli: &Cli, mut config: RunConfig, args: RetrainArgs) -> Result<()> {
    if let Some(alpha) = args.alpha {
        config.dac.alpha = alpha;
    }
    if let Some(q) = args.q {
        config.dac.q = q;
    }
    if let Some(flag) = args.causal_flag {
        config.dac.causal_flag = flag;
    }
    if args.dac_c {
        config.dac.selection = SelectionMode::Correct;
    }
    config.dac.validate()?;

    let dataset = load_dataset(&cli.out)?;
    let model = load_erm(&cli.out)?;
    let default_name = match args.baseline {
        None => "retrain",
        Some(Baseline::Plain) => "retrain-plain",
        Some(Baseline::Balanced) => "retrain-balanced",
    };
    let name = args.name.as_deref().unwrap_or(default_name);

    let mut inputs = BTreeMap::from([
        (
            "dataset_manifest".to_string(),
            file_sha256(&dataset_dir(&cli.out).join("manifest.json"))?,
        ),
        ("erm_checkpoint".to_string(), model.weight_hash()),
    ]);

    // Caches are opened (and checked for staleness) before the stage
    // directory is claimed, so a stale pipeline never destroys outputs.
    let caches = match args.baseline {
        None => {
            let mask_cache = MaskCache::open(&cli.out.join("masks"), &model.weight_hash())?;
            let loss_cache = LossCache::read(&cli.out.join("erm").join("loss_cache.json"))?;
            inputs.insert(
                "mask_index".to_string(),
                file_sha256(&cli.out.join("masks").join("index.json"))?,
            );
            inputs.insert(
                "loss_cache".to_string(),
                file_sha256(&cli.out.join("erm").join("loss_cache.json"))?,
            );
            Some((mask_cache, loss_cache))
        }
        Some(_) => None,
    };

    in_stage_dir(&cli.out, name, cli.force, |dir| {
        let outcome = match (&args.baseline, &caches) {
            (None, Some((mask_cache, loss_cache))) => dac_retrain(
                &model,
                &dataset.train,
                &dataset.val,
                mask_cache,
                loss_cache,
                &config.dac,
            )?,
            (Some(Baseline::Plain), _) => retrain_plain(
                &model,
                &dataset.train,
                &dataset.val,
                &PlainConfig::matching(&config.dac),
            )?,
            (Some(Baseline::Balanced), _) => retrain_group_balanced(
                &model,
                &dataset.train,
                &dataset.val,
                &PlainConfig::matching(&config.dac),
            )?,
            (None, None) => unreachable!("caches are loaded for the composed mode"),
        };
        let metrics = evaluate_final(&outcome.model, &dataset)?;
        save_retrain_outputs(dir, &outcome, &metrics)?;
        write_resolved_config(dir, &format!("retrain:{name}"), &config, cli, inputs.clone())?;
        println!(
            "{name}: val worst {:.3} avg {:.3}, test worst {:.3} avg {:.3}",
            metrics.val.worst, metrics.val.average, metrics.test.worst, metrics.test.average
        );
        Ok(())
    })
}

/// One sweep cell's parameters and final validation metrics.
#[derive(Serialize, Deserialize, Clone)]
struct SweepCell {
    alpha: f64,
    q: f64,
    causal_flag: bool,
    worst_group_val: f64,
    avg_val: f64,
    dir: String,
}

fn cmd_sweep(cli: &Cli, config: &RunConfig) -> Result<()> {
    if config.sweep.alphas.is_empty()
        || config.sweep.qs.is_empty()
        || config.sweep.causal_flags.is_empty()
    {
        return Err(DacError::invalid("sweep grid has an empty axis"));
    }
    let dataset = load_dataset(&cli.out)?;
    let model = load_erm(&cli.out)?;
    let mask_cache = MaskCache::open(&cli.out.join("masks"), &model.weight_hash())?;
    let loss_cache = LossCache::read(&cli.out.join("erm").join("loss_cache.json"))?;
    let inputs = BTreeMap::from([
        (
            "dataset_manifest".to_string(),
            file_sha256(&dataset_dir(&cli.out).join("manifest.json"))?,
        ),
        ("erm_checkpoint".to_string(), model.weight_hash()),
        (
            "mask_index".to_string(),
            file_sha256(&cli.out.join("masks").join("index.json"))?,
        ),
    ]);
    in_stage_dir(&cli.out, "sweep", cli.force, |dir| {
        let mut cells: Vec<SweepCell> = Vec::new();
        let mut best: Option<(SweepCell, RetrainOutcome)> = None;
        for &alpha in &config.sweep.alphas {
            for &q in &config.sweep.qs {
                for &causal_flag in &config.sweep.causal_flags {
                    let cell_config =
                        DacConfig { alpha, q, causal_flag, ..config.dac.clone() };
                    cell_config.validate()?;
                    let outcome = dac_retrain(
                        &model,
                        &dataset.train,
                        &dataset.val,
                        &mask_cache,
                        &loss_cache,
                        &cell_config,
                    )?;
                    let last = outcome.logs.last().expect("at least one epoch");
                    let cell_name = format!("a{alpha}-q{q}-{causal_flag}");
                    let cell_dir = dir.join("cells").join(&cell_name);
                    std::fs::create_dir_all(&cell_dir)?;
                    write_jsonl(&cell_dir.join("train_log.jsonl"), &outcome.logs)?;
                    let cell = SweepCell {
                        alpha,
                        q,
                        causal_flag,
                        worst_group_val: last.worst_group_val,
                        avg_val: last.avg_val,
                        dir: format!("cells/{cell_name}"),
                    };
                    println!(
                        "cell alpha={alpha} q={q} causal_flag={causal_flag}: \
                         val worst {:.3} avg {:.3}",
                        last.worst_group_val, last.avg_val
                    );
                    // Strict comparison keeps the earliest cell on ties.
                    if best
                        .as_ref()
                        .map_or(true, |(b, _)| cell.worst_group_val > b.worst_group_val)
                    {
                        best = Some((cell.clone(), outcome));
                    }
                    cells.push(cell);
                }
            }
        }
        let (best_cell, best_outcome) = best.expect("grid is nonempty");
        let best_dir = dir.join("best");
        std::fs::create_dir_all(&best_dir)?;
        let metrics = evaluate_final(&best_outcome.model, &dataset)?;
        save_retrain_outputs(&best_dir, &best_outcome, &metrics)?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_vec_pretty(&serde_json::json!({
                "cells": cells,
                "best": best_cell,
            }))?,
        )?;
        write_resolved_config(dir, "sweep", config, cli, inputs.clone())?;
        println!(
            "best: alpha={} q={} causal_flag={} (val worst {:.3}); test worst {:.3}",
            best_cell.alpha,
            best_cell.q,
            best_cell.causal_flag,
            best_cell.worst_group_val,
            metrics.test.worst
        );
        Ok(())
    })
}

fn cmd_evaluate(cli: &Cli, config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(&cli.out)?;
    let mut checkpoints: Vec<(String, PathBuf)> = Vec::new();
    let erm = erm_checkpoint_path(&cli.out);
    if erm.exists() {
        checkpoints.push(("erm".into(), erm));
    }
    for entry in std::fs::read_dir(&cli.out)? {
        let entry = entry?;
        let file_name = entry.file_name();
        let name = file_name.to_string_lossy();
        if name.starts_with("retrain") {
            let path = entry.path().join("checkpoint.bin");
            if path.exists() {
                checkpoints.push((name.to_string(), path));
            }
        }
    }
    let sweep_best = cli.out.join("sweep").join("best").join("checkpoint.bin");
    if sweep_best.exists() {
        checkpoints.push(("sweep-best".into(), sweep_best));
    }
    if checkpoints.is_empty() {
        return Err(DacError::invalid(format!(
            "no checkpoints found under {}; train something first",
            cli.out.display()
        )));
    }
    checkpoints.sort();

    in_stage_dir(&cli.out, "evaluate", cli.force, |dir| {
        let mut inputs = BTreeMap::from([(
            "dataset_manifest".to_string(),
            file_sha256(&dataset_dir(&cli.out).join("manifest.json"))?,
        )]);
        let mut report: BTreeMap<String, GroupMetrics> = BTreeMap::new();
        let mut csv = String::from(
            "checkpoint,y0s0,y0s1,y1s0,y1s1,worst,average,sample_weighted\n",
        );
        for (name, path) in &checkpoints {
            let model = SplitModel::load_checkpoint(path)?;
            inputs.insert(format!("checkpoint:{name}"), model.weight_hash());
            let metrics = group_metrics(&model, &dataset.test)?;
            let cell = |key: &str| {
                metrics
                    .per_group
                    .get(key)
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_default()
            };
            csv.push_str(&format!(
                "{name},{},{},{},{},{:.4},{:.4},{:.4}\n",
                cell("y0s0"),
                cell("y0s1"),
                cell("y1s0"),
                cell("y1s1"),
                metrics.worst,
                metrics.average,
                metrics.sample_weighted_average,
            ));
            println!(
                "{name}: test worst {:.3} avg {:.3}",
                metrics.worst, metrics.average
            );
            report.insert(name.clone(), metrics);
        }
        std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
        std::fs::write(dir.join("metrics.csv"), csv)?;
        write_resolved_config(dir, "evaluate", config, cli, inputs)?;
        Ok(())
    })
}

fn cmd_plot(cli: &Cli, config: &RunConfig, heatmaps: usize) -> Result<()> {
    let dataset = load_dataset(&cli.out)?;
    let model = load_erm(&cli.out)?;
    let manifest_hash = file_sha256(&dataset_dir(&cli.out).join("manifest.json"))?;
    in_stage_dir(&cli.out, "plot", cli.force, |dir| {
        let stats = quantile_attention_stats(&model, &dataset.train)?;
        write_svg(&dir.join("attention.svg"), &attention_chart(&stats)?)?;
        std::fs::write(
            dir.join("attention.json"),
            serde_json::to_vec_pretty(&stats)?,
        )?;

        let distribution = group_loss_distribution(&model, &dataset.train)?;
        write_svg(
            &dir.join("loss_quartiles.svg"),
            &loss_distribution_chart(&distribution)?,
        )?;
        std::fs::write(
            dir.join("loss_quartiles.json"),
            serde_json::to_vec_pretty(&distribution)?,
        )?;

        let summary_path = cli.out.join("sweep").join("summary.json");
        if summary_path.exists() {
            let summary: serde_json::Value =
                serde_json::from_slice(&std::fs::read(&summary_path)?)?;
            let cells: Vec<SweepCell> = serde_json::from_value(summary["cells"].clone())?;
            let best: SweepCell = serde_json::from_value(summary["best"].clone())?;
            let points: Vec<(f64, f64, f64)> = cells
                .iter()
                .filter(|c| c.q == best.q && c.causal_flag == best.causal_flag)
                .map(|c| (c.alpha, c.worst_group_val, c.avg_val))
                .collect();
            if !points.is_empty() {
                write_svg(&dir.join("sweep.svg"), &sweep_chart(&points)?)?;
            }
        }

        let n = heatmaps.min(dataset.val.len());
        if n > 0 {
            let chunk = &dataset.val[..n];
            let images = images_tensor(chunk);
            let ids: Vec<String> = chunk.iter().map(|e| e.id.clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            for map in xgradcam_batch(&model, &images, &ids, &targets)? {
                save_heatmap_png(&map, &dir.join(format!("heatmap_{}.png", map.image_id)))?;
            }
        }

        let inputs = BTreeMap::from([
            ("dataset_manifest".to_string(), manifest_hash.clone()),
            ("erm_checkpoint".to_string(), model.weight_hash()),
        ]);
        write_resolved_config(dir, "plot", config, cli, inputs)?;
        println!("plot: wrote charts and {n} heatmaps to {}", dir.display());
        Ok(())
    })
}

fn cmd_knee(csv: &Path, sensitivity: f64, rising: bool) -> Result<()> {
    let text = std::fs::read_to_string(csv)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (a, b) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            (Ok(x), Ok(y)) => {
                xs.push(x);
                ys.push(y);
            }
            _ if lineno == 0 => continue,
            _ => {
                return Err(DacError::invalid(format!(
                    "line {} is not two numbers: {line:?}",
                    lineno + 1
                )))
            }
        }
    }
    let curve = CurvePoints::new(xs, ys)?;
    let result = find_elbow(&curve, sensitivity, rising)?;
    if result.found {
        println!("knee at x={} (index {})", result.x_knee, result.index);
    } else {
        println!("no knee found");
    }
    Ok(())
}

fn cmd_triptych(
    cli: &Cli,
    donor_i: &str,
    donor_j: &str,
    invert: bool,
    png: &Path,
) -> Result<()> {
    let dataset = load_dataset(&cli.out)?;
    let model = load_erm(&cli.out)?;
    let cache = MaskCache::open(&cli.out.join("masks"), &model.weight_hash())?;
    let find = |id: &str| {
        dataset
            .train
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| DacError::invalid(format!("{id:?} is not a training image id")))
    };
    let a = find(donor_i)?;
    let b = find(donor_j)?;
    let mut mask_a = cache.load_mask(&a.id)?;
    let mut mask_b = cache.load_mask(&b.id)?;
    if invert {
        mask_a = mask_a.invert();
        mask_b = mask_b.invert();
    }
    let fill = cache.index.fill.clone();
    let example = compose(&a.image, &mask_a, &b.image, &mask_b, &fill, a.label, &a.id, &b.id)?;
    dac::composer::save_triptych_png(&a.image, &b.image, &example.image, png)?;
    println!(
        "triptych: {} + {} (label {}) -> {}",
        a.id,
        b.id,
        example.label,
        png.display()
    );
    Ok(())
}
