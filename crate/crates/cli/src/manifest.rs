//! Run manifest: everything needed to reproduce a training run on the
//! same build, written before training starts.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bundlerec_core::dataset::{BundleDataset, DatasetStats};
use bundlerec_core::error::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub checksum_sha256: String,
    pub stats: DatasetStats,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub run_dir: String,
    pub resolved_config: String,
    pub train_log: String,
    pub best_checkpoint: String,
    pub last_checkpoint: String,
    pub test_metrics: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_unix: u64,
    pub seed: u64,
    pub param_count: usize,
    pub dataset: DatasetInfo,
    pub config: RunConfig,
    pub artifacts: ArtifactPaths,
}

/// Checksum over the canonical on-disk encoding of the dataset, so the
/// same data hashes identically whether loaded or generated.
pub fn dataset_checksum(dataset: &BundleDataset) -> String {
    let mut hasher = Sha256::new();
    hasher.update(
        format!(
            "{}\t{}\t{}\n",
            dataset.num_users, dataset.num_bundles, dataset.num_items
        )
        .as_bytes(),
    );
    for pairs in [&dataset.user_bundle, &dataset.user_item, &dataset.bundle_item] {
        for &(l, r) in pairs.iter() {
            hasher.update(format!("{l}\t{r}\n").as_bytes());
        }
        hasher.update(b"--\n");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(
        config: RunConfig,
        dataset: &BundleDataset,
        dataset_name: String,
        run_dir: &Path,
    ) -> Self {
        let dir = run_dir.display().to_string();
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            seed: config.trainer.seed,
            param_count: (dataset.num_users + dataset.num_bundles + dataset.num_items)
                * config.model.embedding_dim,
            dataset: DatasetInfo {
                name: dataset_name,
                checksum_sha256: dataset_checksum(dataset),
                stats: dataset.stats(),
            },
            config,
            artifacts: ArtifactPaths {
                run_dir: dir,
                resolved_config: "config.toml".into(),
                train_log: "train_log.jsonl".into(),
                best_checkpoint: "best.ckpt".into(),
                last_checkpoint: "last.ckpt".into(),
                test_metrics: "metrics_test.json".into(),
            },
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}
