//! Output directory layout.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;

/// `<out>/data` holds the dataset; checkpoints, logs and evaluation outputs
/// live under a per-ablation tag.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    pub tag: String,
}

impl Layout {
    pub fn new(out: &Path, cfg: &RunConfig) -> Self {
        Self { out: out.to_path_buf(), tag: cfg.ablation.tag() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.out.join("checkpoints").join(&self.tag).join(format!("{stage}.ckpt"))
    }

    pub fn log(&self, stage: &str) -> PathBuf {
        self.out.join("logs").join(&self.tag).join(format!("{stage}.jsonl"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval").join(&self.tag)
    }

    pub fn stats_dir(&self) -> PathBuf {
        self.out.join("stats")
    }
}
