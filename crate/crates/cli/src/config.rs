//! Run configuration: one JSON file is the canonical record of a run;
//! command-line flags override individual fields. Relative paths resolve
//! against the config file's directory, so a generated dataset directory
//! is self-contained and relocatable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use skycount::evaluation::EvalMode;
use skycount::model::ModelConfig;
use skycount::training::{FocalParams, LossWeights};

fn default_seed() -> u64 {
    7
}
fn default_shots() -> usize {
    3
}
fn default_mode() -> EvalMode {
    EvalMode::FewShot
}
fn default_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    4
}
fn default_min_instances() -> usize {
    4
}
fn default_calib() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSection {
    #[serde(default = "default_lr")]
    pub learn_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            learn_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSection {
    #[serde(default = "default_min_instances")]
    pub min_instances: usize,
    #[serde(default = "default_calib")]
    pub calib_per_dataset: usize,
    #[serde(default)]
    pub test_classes: Vec<String>,
    #[serde(default)]
    pub val_classes: Vec<String>,
}

impl Default for CurationSection {
    fn default() -> Self {
        CurationSection {
            min_instances: default_min_instances(),
            calib_per_dataset: default_calib(),
            test_classes: Vec::new(),
            val_classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathsSection {
    /// Annotation JSONL files; each file is one dataset, tagged by stem.
    #[serde(default)]
    pub annotations: Vec<PathBuf>,
    /// Directory of `<image_id>.ovct` image tensors (fixture-encoder mode).
    #[serde(default)]
    pub images: Option<PathBuf>,
    /// Directory of per-sample feature files; set to ingest real encoder
    /// output instead of running the fixture encoders.
    #[serde(default)]
    pub features: Option<PathBuf>,
    /// Checkpoint directory to load model parameters from.
    #[serde(default)]
    pub checkpoints: Option<PathBuf>,
    /// Where command outputs land.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_mode")]
    pub mode: EvalMode,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub focal: FocalParams,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub curation: CurationSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            shots: default_shots(),
            mode: default_mode(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            optim: OptimSection::default(),
            curation: CurationSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    /// Resolves a path from the config against the config file's directory.
    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}
