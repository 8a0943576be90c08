//! Run configuration: TOML file -> defaults -> CLI flag overrides.
//!
//! The file mirrors the engine's `TrainerConfig` (scalar fields under
//! `[trainer]`, plus `[model]`, `[model.augmentation]`, and `[loss]`),
//! with two CLI-level sections `[data]` and `[eval]`. Every leaf field has
//! a corresponding flag; flags win over the file, the file wins over
//! defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bundlerec_core::dataset::{self, BundleDataset, SplitDataset, SyntheticSpec};
use bundlerec_core::encoder::ModelConfig;
use bundlerec_core::error::{Error, Result};
use bundlerec_core::graph::AugmentationMode;
use bundlerec_core::objectives::{LossConfig, LossMode, ScoreView};
use bundlerec_core::trainer::TrainerConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory; mutually exclusive with `synthetic`.
    pub dataset: Option<PathBuf>,
    /// Synthetic spec `users,bundles,items,blocks,noise_rate`.
    pub synthetic: Option<String>,
    pub synthetic_seed: u64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Seed of the random split (independent of the trainer seed).
    pub split_seed: u64,
    /// Prefer `train.txt`/`tune.txt`/`test.txt` next to the dataset when
    /// they exist.
    pub use_split_files: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: None,
            synthetic: None,
            synthetic_seed: 0,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            split_seed: 0,
            use_split_files: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerScalars {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainerScalars {
    fn default() -> Self {
        let t = TrainerConfig::default();
        TrainerScalars {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub mask_validation_at_test: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![20, 40],
            mask_validation_at_test: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub trainer: TrainerScalars,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            learning_rate: self.trainer.learning_rate,
            batch_size: self.trainer.batch_size,
            max_epochs: self.trainer.max_epochs,
            patience: self.trainer.patience,
            adam_beta1: self.trainer.adam_beta1,
            adam_beta2: self.trainer.adam_beta2,
            adam_eps: self.trainer.adam_eps,
            seed: self.trainer.seed,
            model: self.model.clone(),
            loss: self.loss,
        }
    }

    /// Resolve the configured dataset plus a human-readable name.
    pub fn load_base_dataset(&self) -> Result<(BundleDataset, String)> {
        match (&self.data.dataset, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config(
                "choose either data.dataset or data.synthetic, not both".into(),
            )),
            (Some(dir), None) => {
                let d = dataset::load_dataset(dir)?;
                let name = dir
                    .file_name()
                    .map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into());
                Ok((d, name))
            }
            (None, Some(spec_text)) => {
                let spec = SyntheticSpec::parse(spec_text, self.data.synthetic_seed)?;
                let d = dataset::generate_synthetic(&spec)?;
                Ok((d, format!("synthetic:{spec_text}#{}", self.data.synthetic_seed)))
            }
            (None, None) => Err(Error::Config(
                "no dataset configured; pass --dataset DIR or --synthetic SPEC".into(),
            )),
        }
    }

    /// Load and split: split files on disk win (when enabled), otherwise a
    /// seeded random split at the configured ratios.
    pub fn load_split(&self) -> Result<(SplitDataset, String)> {
        let (base, name) = self.load_base_dataset()?;
        if self.data.use_split_files {
            if let Some(dir) = &self.data.dataset {
                if dir.join("train.txt").is_file()
                    && dir.join("tune.txt").is_file()
                    && dir.join("test.txt").is_file()
                {
                    return Ok((dataset::load_split_files(dir, base)?, name));
                }
            }
        }
        let ratios = (
            self.data.train_ratio,
            self.data.val_ratio,
            self.data.test_ratio,
        );
        Ok((dataset::split(&base, ratios, self.data.split_seed)?, name))
    }
}

pub fn parse_loss_mode(text: &str) -> Result<LossMode> {
    match text.to_ascii_lowercase().as_str() {
        "full" => Ok(LossMode::Full),
        "no_cl" | "nocl" => Ok(LossMode::NoCl),
        "align_only" | "alignonly" => Ok(LossMode::AlignOnly),
        "disperse_only" | "disperseonly" => Ok(LossMode::DisperseOnly),
        other => Err(Error::Config(format!(
            "unknown loss mode {other:?}; expected full|no_cl|align_only|disperse_only"
        ))),
    }
}

pub fn parse_augmentation(text: &str) -> Result<AugmentationMode> {
    match text.to_ascii_lowercase().as_str() {
        "op" => Ok(AugmentationMode::Op),
        "ed" => Ok(AugmentationMode::Ed),
        "md" => Ok(AugmentationMode::Md),
        other => Err(Error::Config(format!(
            "unknown augmentation {other:?}; expected op|ed|md"
        ))),
    }
}

pub fn parse_view(text: &str) -> Result<ScoreView> {
    match text.to_ascii_lowercase().as_str() {
        "bundle" => Ok(ScoreView::Bundle),
        "item" => Ok(ScoreView::Item),
        "both" => Ok(ScoreView::Both),
        other => Err(Error::Config(format!(
            "unknown view {other:?}; expected bundle|item|both"
        ))),
    }
}

pub fn parse_ks(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad K value {s:?}")))
        })
        .collect()
}

/// Flag overrides for every leaf of `RunConfig`; `None` keeps the file or
/// default value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigOverrides {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Synthetic dataset spec `users,bundles,items,blocks,noise_rate`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Seed of the synthetic generator.
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Training fraction of the user-bundle pairs.
    #[arg(long)]
    pub train_ratio: Option<f64>,
    /// Validation fraction.
    #[arg(long)]
    pub val_ratio: Option<f64>,
    /// Test fraction.
    #[arg(long)]
    pub test_ratio: Option<f64>,
    /// Seed of the random split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Use train/tune/test files from the dataset directory when present.
    #[arg(long)]
    pub use_split_files: Option<bool>,

    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Training triples per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum training epochs.
    #[arg(long = "epochs")]
    pub max_epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Adam first-moment decay.
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    /// Adam epsilon.
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// Master seed for init, sampling, and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Embedding dimensionality d.
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Propagation depth K.
    #[arg(long)]
    pub num_layers: Option<usize>,
    /// Multiplier on the Xavier init std.
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Add self-loops to the propagation graphs.
    #[arg(long)]
    pub include_self_connections: Option<bool>,
    /// Add item-overlap bundle-bundle edges to the user-bundle graph.
    #[arg(long)]
    pub include_bundle_bundle: Option<bool>,
    /// Augmentation mode: op, ed, or md.
    #[arg(long)]
    pub augmentation: Option<String>,
    /// Augmentation dropout ratio rho.
    #[arg(long)]
    pub dropout_ratio: Option<f64>,
    /// Extra seed mixed into augmentation streams.
    #[arg(long)]
    pub augmentation_seed: Option<u64>,

    /// Contrastive loss weight lambda1.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// L2 weight lambda2.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// InfoNCE temperature tau.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Loss mode: full, no_cl, align_only, or disperse_only.
    #[arg(long)]
    pub mode: Option<String>,
    /// Mean-reduce the BPR sum by the batch size.
    #[arg(long)]
    pub bpr_mean: Option<bool>,

    /// Comma-separated ranking cutoffs, e.g. `20,40`.
    #[arg(long = "k")]
    pub ks: Option<String>,
    /// Mask validation positives when evaluating on test.
    #[arg(long)]
    pub mask_validation_at_test: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($field:expr, $target:expr) => {
                if let Some(v) = &$field {
                    $target = v.clone();
                }
            };
        }
        if self.dataset.is_some() {
            cfg.data.dataset = self.dataset.clone();
            cfg.data.synthetic = None;
        }
        if self.synthetic.is_some() {
            cfg.data.synthetic = self.synthetic.clone();
            cfg.data.dataset = None;
        }
        set!(self.synthetic_seed, cfg.data.synthetic_seed);
        set!(self.train_ratio, cfg.data.train_ratio);
        set!(self.val_ratio, cfg.data.val_ratio);
        set!(self.test_ratio, cfg.data.test_ratio);
        set!(self.split_seed, cfg.data.split_seed);
        set!(self.use_split_files, cfg.data.use_split_files);

        set!(self.learning_rate, cfg.trainer.learning_rate);
        set!(self.batch_size, cfg.trainer.batch_size);
        set!(self.max_epochs, cfg.trainer.max_epochs);
        set!(self.patience, cfg.trainer.patience);
        set!(self.adam_beta1, cfg.trainer.adam_beta1);
        set!(self.adam_beta2, cfg.trainer.adam_beta2);
        set!(self.adam_eps, cfg.trainer.adam_eps);
        set!(self.seed, cfg.trainer.seed);

        set!(self.embedding_dim, cfg.model.embedding_dim);
        set!(self.num_layers, cfg.model.num_layers);
        set!(self.init_scale, cfg.model.init_scale);
        set!(self.include_self_connections, cfg.model.include_self_connections);
        set!(self.include_bundle_bundle, cfg.model.include_bundle_bundle);
        if let Some(text) = &self.augmentation {
            cfg.model.augmentation.mode = parse_augmentation(text)?;
        }
        set!(self.dropout_ratio, cfg.model.augmentation.dropout_ratio);
        set!(self.augmentation_seed, cfg.model.augmentation.seed);

        set!(self.lambda1, cfg.loss.lambda1);
        set!(self.lambda2, cfg.loss.lambda2);
        set!(self.temperature, cfg.loss.temperature);
        if let Some(text) = &self.mode {
            cfg.loss.mode = parse_loss_mode(text)?;
        }
        set!(self.bpr_mean, cfg.loss.bpr_mean);

        if let Some(text) = &self.ks {
            cfg.eval.ks = parse_ks(text)?;
        }
        set!(self.mask_validation_at_test, cfg.eval.mask_validation_at_test);
        Ok(())
    }
}
