//! `bundlerec`: train, evaluate, and diagnose two-view bundle
//! recommendation models from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 dataset error,
//! 4 numerical abort, 5 checkpoint/dataset dimension mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use bundlerec_core::checkpoint::Checkpoint;
use bundlerec_core::dataset::{self, SyntheticSpec};
use bundlerec_core::encoder::{forward, Graphs, ModelConfig};
use bundlerec_core::error::{Error, Result};
use bundlerec_core::evaluator::{alignment_dispersion, rank_and_score, EvalTarget};
use bundlerec_core::graph::AugmentationMode;
use bundlerec_core::trainer::{train, TrainerConfig};

use bundlerec_cli::config::{parse_view, ConfigOverrides, RunConfig};
use bundlerec_cli::manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "bundlerec",
    version,
    about = "Bundle recommendation engine: two-view graph embeddings with cross-view contrastive training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs, checkpoints, and test metrics.
    Train(TrainArgs),
    /// Rank the full catalog from a checkpoint and report Recall/NDCG.
    Evaluate(EvaluateArgs),
    /// Report alignment-dispersion diagnostics from a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic planted-block dataset directory.
    Synth(SynthArgs),
    /// Print statistics of a dataset directory.
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Exact output directory (default: `<out-root>/<timestamp>-<tag>`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Parent directory for generated run directories.
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
    /// Tag appended to the generated run directory name.
    #[arg(long, default_value = "run")]
    tag: String,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Ground-truth split: test or validation.
    #[arg(long, default_value = "test")]
    split: String,
    /// Scoring view: bundle, item, or both.
    #[arg(long, default_value = "both")]
    view: String,
    /// Write the JSON report here instead of stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the metrics as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(clap::Args)]
struct DiagnoseArgs {
    /// Checkpoint to diagnose.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pairs sampled for the dispersion terms; 0 = exact all-pairs.
    #[arg(long, default_value_t = 100_000)]
    sample: usize,
    /// Seed of the pair sampler.
    #[arg(long, default_value_t = 0)]
    diag_seed: u64,
    /// Write the JSON report here instead of stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the report as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Spec `users,bundles,items,blocks,noise_rate`.
    #[arg(long)]
    spec: String,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write train/tune/test split files.
    #[arg(long, default_value_t = false)]
    with_splits: bool,
    /// Ratios and seed for --with-splits.
    #[arg(long, default_value_t = 0.7)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    val_ratio: f64,
    #[arg(long, default_value_t = 0.2)]
    test_ratio: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(clap::Args)]
struct InspectArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Emit JSON only (no table).
    #[arg(long, default_value_t = false)]
    json: bool,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidRatios(_)
        | Error::InvalidNoiseRate(_)
        | Error::BlocksDoNotDivide { .. }
        | Error::InvalidDropoutRatio(_) => 2,
        Error::MissingFile(_)
        | Error::Io { .. }
        | Error::Format { .. }
        | Error::IdOutOfRange { .. }
        | Error::InteractedBundleWithoutItems(_)
        | Error::EmptyBundle(_)
        | Error::NoNegativeCandidates(_) => 3,
        Error::NonFiniteLoss { .. }
        | Error::NonFiniteGradient { .. }
        | Error::ZeroNormRow { .. }
        | Error::ContrastiveBatchTooSmall(_)
        | Error::ShapeMismatch { .. } => 4,
        Error::DimensionMismatch(_, _) => 5,
        Error::Checkpoint(_) => 2,
    }
}

fn main() {
    // die quietly when output is piped into `head` and friends
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn resolve_config(path: Option<&Path>, overrides: &ConfigOverrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let trainer_cfg: TrainerConfig = cfg.trainer_config();
    trainer_cfg.validate()?;
    let (split, dataset_name) = cfg.load_split()?;

    let run_dir = match args.run_dir {
        Some(dir) => dir,
        None => {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            args.out_root.join(format!("{stamp}-{}", args.tag))
        }
    };
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let manifest = RunManifest::new(cfg.clone(), &split.base, dataset_name, &run_dir);
    manifest.write(&run_dir.join("manifest.json"))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml())
        .map_err(|e| Error::io(run_dir.join("config.toml"), e))?;

    println!(
        "training on {} ({} users, {} bundles, {} items; {} train pairs; {} parameters)",
        manifest.dataset.name,
        split.base.num_users,
        split.base.num_bundles,
        split.base.num_items,
        split.train.len(),
        manifest.param_count,
    );
    let outcome = train(&split, &trainer_cfg)?;
    for record in outcome.log.epochs() {
        println!(
            "epoch {:>4}  val_recall20 {:.6}  val_ndcg20 {:.6}",
            record.epoch, record.val_recall20, record.val_ndcg20
        );
    }
    println!(
        "best epoch {} (val NDCG@20 {})",
        outcome.best_epoch,
        outcome
            .best_val_ndcg20
            .map_or("n/a".to_string(), |v| format!("{v:.6}")),
    );

    fs::write(run_dir.join("train_log.jsonl"), outcome.log.to_jsonl())
        .map_err(|e| Error::io(run_dir.join("train_log.jsonl"), e))?;
    let num_layers = trainer_cfg.model.num_layers as u32;
    Checkpoint {
        state: outcome.best_state.clone(),
        epoch: outcome.best_epoch,
        num_layers,
        adam: Some(outcome.best_adam),
    }
    .save(&run_dir.join("best.ckpt"))?;
    Checkpoint {
        state: outcome.final_state,
        epoch: outcome.epochs_run,
        num_layers,
        adam: Some(outcome.final_adam),
    }
    .save(&run_dir.join("last.ckpt"))?;

    // final test metrics from the best snapshot
    let graphs = Graphs::build(&split.base, &split.train, &trainer_cfg.model);
    let eval_model = op_model(&trainer_cfg.model);
    let reps = forward(&outcome.best_state, &graphs, &eval_model, 0)?;
    let report = rank_and_score(
        &reps,
        &split,
        EvalTarget::Test,
        &cfg.eval.ks,
        parse_view("both")?,
        cfg.eval.mask_validation_at_test,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    fs::write(run_dir.join("metrics_test.json"), &json)
        .map_err(|e| Error::io(run_dir.join("metrics_test.json"), e))?;
    fs::write(run_dir.join("metrics_test.txt"), report.to_table())
        .map_err(|e| Error::io(run_dir.join("metrics_test.txt"), e))?;
    println!("{}", report.to_table());
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

/// Evaluation always runs the deterministic OP forward.
fn op_model(model: &ModelConfig) -> ModelConfig {
    let mut m = model.clone();
    m.augmentation.mode = AugmentationMode::Op;
    m
}

/// Load a checkpoint and rebuild representations against the configured
/// dataset, checking dimensions.
fn reps_from_checkpoint(
    path: &Path,
    cfg: &RunConfig,
) -> Result<(
    bundlerec_core::encoder::ViewRepresentations,
    bundlerec_core::dataset::SplitDataset,
    ModelConfig,
)> {
    let ckpt = Checkpoint::load(path)?;
    let (split, _) = cfg.load_split()?;
    let state = &ckpt.state;
    if state.num_users() != split.base.num_users
        || state.num_bundles() != split.base.num_bundles
        || state.num_items() != split.base.num_items
    {
        return Err(Error::DimensionMismatch(
            format!(
                "{}x{}x{} (d={})",
                state.num_users(),
                state.num_bundles(),
                state.num_items(),
                state.dim()
            ),
            format!(
                "{}x{}x{}",
                split.base.num_users, split.base.num_bundles, split.base.num_items
            ),
        ));
    }
    let mut model = cfg.model.clone();
    model.embedding_dim = state.dim();
    model.num_layers = ckpt.num_layers as usize;
    let model = op_model(&model);
    let graphs = Graphs::build(&split.base, &split.train, &model);
    let reps = forward(state, &graphs, &model, 0)?;
    Ok((reps, split, model))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = resolve_config(None, &args.overrides)?;
    let target = match args.split.to_ascii_lowercase().as_str() {
        "test" => EvalTarget::Test,
        "validation" | "tune" | "val" => EvalTarget::Validation,
        other => {
            return Err(Error::Config(format!(
                "unknown split {other:?}; expected test|validation"
            )))
        }
    };
    let view = parse_view(&args.view)?;
    let (reps, split, _) = reps_from_checkpoint(&args.checkpoint, &cfg)?;
    let report = rank_and_score(
        &reps,
        &split,
        target,
        &cfg.eval.ks,
        view,
        cfg.eval.mask_validation_at_test,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    if let Some(out) = &args.out {
        fs::write(out, &json).map_err(|e| Error::io(out, e))?;
    }
    if let Some(csv) = &args.csv {
        fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    println!("{json}");
    println!("{}", report.to_table());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let cfg = resolve_config(None, &args.overrides)?;
    let (reps, _, _) = reps_from_checkpoint(&args.checkpoint, &cfg)?;
    let report = alignment_dispersion(&reps, args.sample, args.diag_seed)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    if let Some(out) = &args.out {
        fs::write(out, &json).map_err(|e| Error::io(out, e))?;
    }
    if let Some(csv) = &args.csv {
        fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    println!("{json}");
    println!("{}", report.to_table());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec::parse(&args.spec, args.seed)?;
    let data = dataset::generate_synthetic(&spec)?;
    dataset::write_dataset(&data, &args.out)?;
    if args.with_splits {
        let split = dataset::split(
            &data,
            (args.train_ratio, args.val_ratio, args.test_ratio),
            args.split_seed,
        )?;
        dataset::write_split_files(&split, &args.out)?;
    }
    let stats = data.stats();
    println!(
        "wrote {} ({} user-bundle, {} user-item, {} bundle-item pairs)",
        args.out.display(),
        stats.user_bundle_pairs,
        stats.user_item_pairs,
        stats.bundle_item_pairs
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let data = dataset::load_dataset(&args.dataset)?;
    let stats = data.stats();
    let json = serde_json::to_string_pretty(&stats)
        .map_err(|e| Error::Config(format!("stats serialization: {e}")))?;
    println!("{json}");
    if !args.json {
        println!();
        println!("field                  value");
        println!("users                  {}", stats.num_users);
        println!("bundles                {}", stats.num_bundles);
        println!("items                  {}", stats.num_items);
        println!("user-bundle pairs      {}", stats.user_bundle_pairs);
        println!("user-item pairs        {}", stats.user_item_pairs);
        println!("bundle-item pairs      {}", stats.bundle_item_pairs);
        println!("avg items per bundle   {:.2}", stats.avg_items_per_bundle);
    }
    Ok(())
}
