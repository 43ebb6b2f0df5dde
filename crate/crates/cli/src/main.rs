//! Operator entry point: data generation, training, evaluation, prediction,
//! attribution, and ablation runs, with a reproduction manifest per run.

mod config;
mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};
use manifest::Manifest;
use stormlatent_core::attribution::{aggregate_attribution, attribute_model_sample, attribution_csv};
use stormlatent_core::dataset::{load_split, save_sequence, SPLITS};
use stormlatent_core::metrics::metrics_csv;
use stormlatent_core::synth::{compute_stats, generate_sequence, split_indices, NormStats, Sequence};
use stormlatent_core::tensor::io::{save_archive, TensorArchive};
use stormlatent_core::tensor::TensorError;
use stormlatent_core::train::{
    evaluate_model, fit, load_checkpoint, predict_sequence, predictor_step_macs, save_checkpoint,
    IterationSpace, LossVariant, TrainConfig,
};

// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
#[derive(Debug)]
enum RunError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl RunError {
    fn code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            RunError::Config(m) | RunError::Data(m) | RunError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e.to_string())
    }
}

impl From<TensorError> for RunError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => RunError::Numeric(e.to_string()),
            TensorError::InvalidArg(_) | TensorError::ShapeMismatch { .. } => {
                RunError::Config(e.to_string())
            }
            _ => RunError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "stormlatent", version, about = "Latent-space iterative precipitation forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory; every artifact this run writes goes under it.
    #[arg(long)]
    out: PathBuf,
    /// Optional `key = value` config file; absent keys use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-source dataset with train/val/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Total number of sequences (split 80/10/10).
        #[arg(long, default_value_t = 10)]
        sequences: usize,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Override the config loss variant.
        #[arg(long)]
        loss_variant: Option<LossVariant>,
        /// Override the config iteration space (latent or physical).
        #[arg(long)]
        iteration_space: Option<IterationSpace>,
    },
    /// Score a checkpoint on the test split; writes a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also render score-vs-lead curves as SVG files.
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        iteration_space: Option<IterationSpace>,
    },
    /// Forecast one test sequence; writes the fields as a tensor archive.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the sequence within the test split.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long)]
        iteration_space: Option<IterationSpace>,
    },
    /// Integrated-gradients channel attribution on test sequences.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Comparison suites: loss ladder, latent vs physical, sampling.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// One of: loss, space, sampling.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        plot: bool,
    },
}

/// Per-lead rows followed by the pooled means (lead_step 0).
fn full_metrics_csv(scores: &stormlatent_core::metrics::RunScores) -> String {
    let mut rows = scores.rows.clone();
    rows.extend(scores.means.iter().cloned());
    metrics_csv(&rows)
}

fn load_config(common: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn worker_count() -> usize {
    std::env::var("STORMLATENT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn load_dataset(data: &Path) -> Result<(Vec<Sequence>, Vec<Sequence>, Vec<Sequence>), RunError> {
    let load = |split: &str| -> Result<Vec<Sequence>, RunError> {
        let seqs = load_split(&data.join(split))
            .map_err(|e| RunError::Data(format!("loading {split} split: {e}")))?;
        if seqs.is_empty() {
            return Err(RunError::Data(format!("empty {split} split in {}", data.display())));
        }
        Ok(seqs)
    };
    Ok((load("train")?, load("val")?, load("test")?))
}

fn stats_from_train(cfg: &RunConfig, train: &[Sequence]) -> Result<NormStats, RunError> {
    compute_stats(train, &cfg.generator).map_err(|e| RunError::Data(e.to_string()))
}

fn cmd_gen_data(common: &Common, sequences: usize) -> Result<(), RunError> {
    let cfg = load_config(common)?;
    if sequences == 0 {
        return Err(RunError::Config("--sequences must be at least 1".into()));
    }
    let mut manifest = Manifest::new("gen-data", &cfg, cfg.train.seed);

    // Generate in parallel chunks; output is ordered by index, so the
    // result is independent of the worker count.
    let workers = worker_count().min(sequences);
    let base = cfg.train.seed;
    let gen = &cfg.generator;
    let mut seqs: Vec<Option<Sequence>> = vec![None; sequences];
    let results: Vec<(usize, Result<Sequence, String>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            handles.push(scope.spawn(move || {
                (w..sequences)
                    .step_by(workers)
                    .map(|i| {
                        (
                            i,
                            generate_sequence(base.wrapping_add(i as u64), gen)
                                .map_err(|e| e.to_string()),
                        )
                    })
                    .collect::<Vec<_>>()
            }));
        }
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    for (i, r) in results {
        seqs[i] = Some(r.map_err(RunError::Data)?);
    }
    let seqs: Vec<Sequence> = seqs.into_iter().map(|s| s.unwrap()).collect();

    let (train, val, test) = split_indices(sequences);
    for (name, range) in SPLITS.iter().zip([train, val, test]) {
        let dir = common.out.join(name);
        std::fs::create_dir_all(&dir)?;
        for (local, global) in range.enumerate() {
            save_sequence(&dir, local, &seqs[global])?;
            manifest.artifact(&common.out, &dir.join(format!("seq_{local:04}.lptf")))?;
        }
    }
    manifest.write(&common.out)?;
    println!("gen-data: wrote {sequences} sequences to {}", common.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    cfg: &RunConfig,
    train: &[Sequence],
    val: &[Sequence],
    stats: &NormStats,
    out: &Path,
    tag: &str,
    tcfg: &TrainConfig,
    manifest: &mut Manifest,
) -> Result<PathBuf, RunError> {
    let (store, report) = fit(train, val, stats, &cfg.model, tcfg)?;
    std::fs::create_dir_all(out)?;
    let ckpt = out.join(format!("{tag}.ckpt"));
    save_checkpoint(&ckpt, &store, &cfg.model, tcfg.seed)?;
    std::fs::write(out.join(format!("{tag}_epochs.csv")), report.epoch_csv())?;
    std::fs::write(out.join(format!("{tag}_losses.csv")), report.breakdown_csv())?;
    for name in [
        format!("{tag}.ckpt"),
        format!("{tag}.meta"),
        format!("{tag}_epochs.csv"),
        format!("{tag}_losses.csv"),
    ] {
        manifest.artifact(out, &out.join(name))?;
    }
    println!(
        "{tag}: best epoch {} (val CSI@0.2 {:.4}) over {} sequences",
        report.best_epoch,
        report.best_val_csi.max(0.0),
        report.trained_sequences
    );
    Ok(ckpt)
}

fn cmd_train(
    common: &Common,
    data: &Path,
    loss_variant: Option<LossVariant>,
    iteration_space: Option<IterationSpace>,
) -> Result<(), RunError> {
    let mut cfg = load_config(common)?;
    if let Some(v) = loss_variant {
        cfg.train.loss_variant = v;
    }
    if let Some(s) = iteration_space {
        cfg.train.iteration_space = s;
    }
    let (train, val, _) = load_dataset(data)?;
    let stats = stats_from_train(&cfg, &train)?;
    let mut manifest = Manifest::new("train", &cfg, cfg.train.seed);
    let tcfg = cfg.train.clone();
    run_training(&cfg, &train, &val, &stats, &common.out, "model", &tcfg, &mut manifest)?;
    manifest.write(&common.out)?;
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    plot: bool,
    iteration_space: Option<IterationSpace>,
) -> Result<(), RunError> {
    let cfg = load_config(common)?;
    let space = iteration_space.unwrap_or(cfg.train.iteration_space);
    let (train, _, test) = load_dataset(data)?;
    let stats = stats_from_train(&cfg, &train)?;
    let (mut store, mcfg, seed) = load_checkpoint(checkpoint)?;
    let mut manifest = Manifest::new("eval", &cfg, seed);

    let scores = evaluate_model(
        &mcfg,
        &mut store,
        space,
        &test,
        &stats,
        cfg.eval_horizon,
        &cfg.thresholds,
        cfg.hss_standard,
    )?;
    std::fs::create_dir_all(&common.out)?;
    let csv_path = common.out.join("metrics.csv");
    std::fs::write(&csv_path, full_metrics_csv(&scores))?;
    manifest.artifact(&common.out, &csv_path)?;
    if plot {
        for (name, path) in plot::score_curves(&scores, &common.out)? {
            manifest.artifact(&common.out, &path)?;
            println!("eval: plotted {name}");
        }
    }
    manifest.write(&common.out)?;
    println!("eval: wrote {}", csv_path.display());
    Ok(())
}

fn cmd_predict(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    sequence: usize,
    iteration_space: Option<IterationSpace>,
) -> Result<(), RunError> {
    let cfg = load_config(common)?;
    let space = iteration_space.unwrap_or(cfg.train.iteration_space);
    let (train, _, test) = load_dataset(data)?;
    if sequence >= test.len() {
        return Err(RunError::Data(format!(
            "sequence index {sequence} out of range; test split has {}",
            test.len()
        )));
    }
    let stats = stats_from_train(&cfg, &train)?;
    let (mut store, mcfg, seed) = load_checkpoint(checkpoint)?;
    let mut manifest = Manifest::new("predict", &cfg, seed);

    let fields = predict_sequence(
        &mcfg,
        &mut store,
        space,
        &test[sequence],
        &stats,
        cfg.eval_origin,
        cfg.eval_horizon,
    )?;
    let mut archive = TensorArchive::new();
    for (k, t) in fields.into_iter().enumerate() {
        archive.insert(format!("lead_{:02}", k + 1), t);
    }
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join(format!("forecast_seq{sequence:04}.lptf"));
    save_archive(&path, &archive)?;
    manifest.artifact(&common.out, &path)?;
    manifest.write(&common.out)?;
    println!("predict: wrote {}", path.display());
    Ok(())
}

fn cmd_attribute(common: &Common, data: &Path, checkpoint: &Path) -> Result<(), RunError> {
    let cfg = load_config(common)?;
    let (train, _, test) = load_dataset(data)?;
    let stats = stats_from_train(&cfg, &train)?;
    let (mut store, mcfg, seed) = load_checkpoint(checkpoint)?;
    let mut manifest = Manifest::new("attribute", &cfg, seed);

    // Lead groups mirroring the short/medium/long split, clipped to the
    // configured horizon.
    let groups: Vec<(usize, usize)> = [(1, 6), (7, 12), (13, 24)]
        .into_iter()
        .filter(|(lo, _)| *lo <= cfg.eval_horizon)
        .map(|(lo, hi)| (lo, hi.min(cfg.eval_horizon)))
        .collect();
    let n = cfg.attr_samples.min(test.len()).max(1);

    let mut rows = Vec::new();
    let mut worst_err: f64 = 0.0;
    for (lo, hi) in groups {
        let label = format!("{lo}-{hi}");
        let mut per_sample = Vec::new();
        for seq in test.iter().take(n) {
            let a = attribute_model_sample(
                &mcfg,
                &mut store,
                seq,
                &stats,
                cfg.eval_origin,
                (lo, hi),
                cfg.ig_steps,
            )?;
            worst_err = worst_err.max(a.completeness_rel_err);
            per_sample.push(a.per_channel);
        }
        rows.extend(aggregate_attribution(&per_sample, &label));
    }
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("attribution.csv");
    std::fs::write(&path, attribution_csv(&rows))?;
    manifest.artifact(&common.out, &path)?;
    manifest.note(&format!("ig_completeness_worst_rel_err={worst_err:.6e}"));
    manifest.write(&common.out)?;
    println!(
        "attribute: wrote {} ({} samples, worst completeness error {:.3e})",
        path.display(),
        n,
        worst_err
    );
    Ok(())
}

fn cmd_ablate(common: &Common, data: &Path, suite: &str, plot: bool) -> Result<(), RunError> {
    let cfg = load_config(common)?;
    let (train, val, test) = load_dataset(data)?;
    let stats = stats_from_train(&cfg, &train)?;
    let mut manifest = Manifest::new("ablate", &cfg, cfg.train.seed);

    // Each arm differs from the base recipe in exactly one knob.
    let arms: Vec<(String, TrainConfig)> = match suite {
        "loss" => LossVariant::ALL
            .iter()
            .map(|v| {
                let mut t = cfg.train.clone();
                t.loss_variant = *v;
                (format!("loss_{}", v.as_str()), t)
            })
            .collect(),
        "space" => [IterationSpace::Latent, IterationSpace::Physical]
            .iter()
            .map(|s| {
                let mut t = cfg.train.clone();
                t.iteration_space = *s;
                (format!("space_{}", s.as_str()), t)
            })
            .collect(),
        "sampling" => [false, true]
            .iter()
            .map(|&on| {
                let mut t = cfg.train.clone();
                t.importance_sampling = on;
                (
                    format!("sampling_{}", if on { "importance" } else { "full" }),
                    t,
                )
            })
            .collect(),
        other => {
            return Err(RunError::Config(format!(
                "unknown ablation suite '{other}' (expected loss, space, or sampling)"
            )))
        }
    };

    let mut combined = String::from("variant,lead_step,threshold,POD,CSI,HSS,FBI\n");
    let mut curves = Vec::new();
    for (tag, tcfg) in &arms {
        let ckpt = run_training(&cfg, &train, &val, &stats, &common.out, tag, tcfg, &mut manifest)?;
        let (mut store, mcfg, _) = load_checkpoint(&ckpt)?;
        let scores = evaluate_model(
            &mcfg,
            &mut store,
            tcfg.iteration_space,
            &test,
            &stats,
            cfg.eval_horizon,
            &cfg.thresholds,
            cfg.hss_standard,
        )?;
        if suite == "space" {
            let macs = predictor_step_macs(&mcfg, &mut store, tcfg.iteration_space);
            manifest.note(&format!("{tag}_step_macs={macs}"));
        }
        for line in full_metrics_csv(&scores).lines().skip(1) {
            combined.push_str(tag);
            combined.push(',');
            combined.push_str(line);
            combined.push('\n');
        }
        curves.push((tag.clone(), scores));
    }
    let path = common.out.join("ablation.csv");
    std::fs::write(&path, &combined)?;
    manifest.artifact(&common.out, &path)?;
    if plot {
        let p = plot::variant_curves(&curves, &common.out)?;
        manifest.artifact(&common.out, &p)?;
    }
    manifest.write(&common.out)?;
    println!("ablate: wrote {} ({} variants)", path.display(), arms.len());
    Ok(())
}

fn run() -> Result<(), RunError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { common, sequences } => cmd_gen_data(common, *sequences),
        Command::Train { common, data, loss_variant, iteration_space } => {
            cmd_train(common, data, *loss_variant, *iteration_space)
        }
        Command::Eval { common, data, checkpoint, plot, iteration_space } => {
            cmd_eval(common, data, checkpoint, *plot, *iteration_space)
        }
        Command::Predict { common, data, checkpoint, sequence, iteration_space } => {
            cmd_predict(common, data, checkpoint, *sequence, *iteration_space)
        }
        Command::Attribute { common, data, checkpoint } => {
            cmd_attribute(common, data, checkpoint)
        }
        Command::Ablate { common, data, suite, plot } => cmd_ablate(common, data, suite, *plot),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
