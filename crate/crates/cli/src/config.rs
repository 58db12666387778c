//! Run configuration: a single JSON file covers every verb; CLI flags
//! override individual fields. Each run echoes its resolved config and a
//! hash of it into a manifest in the output directory.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cotlab::model::ModelConfig;
use cotlab::task::{CorpusStyle, TaskConfig};
use cotlab::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftConfig {
    pub corpus: CorpusStyle,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Held-out prompts for the greedy well-formedness gate.
    pub eval_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { corpus: CorpusStyle::Genuine, steps: 1200, batch: 32, lr: 3e-4, eval_size: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub sft: SftConfig,
    /// Probe-set size for eval/compare.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default)]
    pub probe_seed: u64,
}

fn default_probe_size() -> usize {
    512
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig { probe_size: default_probe_size(), ..Default::default() }),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.model.d_model % self.model.heads == 0, "d_model must divide heads");
        anyhow::ensure!(self.train.k >= 2, "rollout groups need k >= 2");
        anyhow::ensure!(
            self.task.min_operand >= 1 && self.task.min_operand <= self.task.max_operand,
            "bad operand range"
        );
        anyhow::ensure!(
            (0.0..=1.0).contains(&self.task.hint_correct_prob),
            "hint_correct_prob must be a probability"
        );
        anyhow::ensure!(self.train.max_new >= 4, "max_new too small to close a trace");
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    mode: &'a str,
    seed: u64,
    code_version: &'a str,
    config_sha256: String,
    created_unix: u64,
    config: &'a RunConfig,
}

/// Write `manifest.json` into the run directory; every artifact in that
/// directory is attributable to it.
pub fn write_manifest(out_dir: &Path, mode: &str, seed: u64, cfg: &RunConfig) -> Result<()> {
    let cfg_json = serde_json::to_string_pretty(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(cfg_json.as_bytes());
    let manifest = Manifest {
        mode,
        seed,
        code_version: env!("CARGO_PKG_VERSION"),
        config_sha256: format!("{:x}", hasher.finalize()),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: cfg,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
