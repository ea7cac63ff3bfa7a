//! Layout of a run directory.
//!
//! ```text
//! <root>/<name>/
//!   config.conf          resolved configuration, every key
//!   run.json             dataset path, hash and manifest
//!   dataset.jsonl        only when the dataset was generated from the config
//!   epochs.csv           one row per epoch
//!   model_losses.csv     per-model losses per epoch
//!   corrections.jsonl    every recalled label
//!   metrics.json         final report on the held-out split
//!   checkpoint.json      latest checkpoint
//!   checkpoints/         periodic checkpoints
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use comic_core::Dataset;

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.conf")
    }

    pub fn info(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn epochs(&self) -> PathBuf {
        self.root.join("epochs.csv")
    }

    pub fn model_losses(&self) -> PathBuf {
        self.root.join("model_losses.csv")
    }

    pub fn corrections(&self) -> PathBuf {
        self.root.join("corrections.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }

    pub fn periodic_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.json"))
    }

    pub fn write(&self, path: &Path, contents: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Dataset path recorded by `train`, resolved against the run directory.
    pub fn recorded_dataset(&self) -> Result<PathBuf> {
        let text = fs::read_to_string(self.info())
            .with_context(|| format!("reading {}", self.info().display()))?;
        let v: Value = serde_json::from_str(&text).context("run.json is not valid JSON")?;
        let path = v["dataset_path"]
            .as_str()
            .context("run.json has no dataset_path")?;
        let p = PathBuf::from(path);
        Ok(if p.is_absolute() { p } else { self.root.join(p) })
    }
}

pub fn manifest_json(ds: &Dataset) -> Value {
    let m = &ds.manifest;
    json!({
        "num_classes": m.num_classes,
        "feature_dim": m.feature_dim,
        "num_samples": ds.len(),
        "class_counts": m.class_counts,
        "shot_groups": m.shot_groups,
        "missing_rate": m.missing_rate,
        "seed": m.seed,
        "content_hash": ds.content_hash(),
    })
}
