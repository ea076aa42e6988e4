//! Training run configuration: a JSON file merged with flag overrides.
//! Every run writes its fully resolved configuration next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mobgpt_core::model::optim::TrainConfig;
use mobgpt_core::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Ping CSV consumed for training.
    pub data: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dow_offset: u32,
    #[serde(default = "default_horizon")]
    pub horizon_day: u32,
    #[serde(default = "default_heldout")]
    pub n_val: usize,
    #[serde(default = "default_heldout")]
    pub n_test: usize,
    #[serde(default = "default_one")]
    pub split_seed: u64,
    /// Window day range [day_min, day_max).
    #[serde(default)]
    pub day_min: u32,
    #[serde(default = "default_day_max")]
    pub day_max: u32,
    /// Validation windows used per eval pass (cost control).
    #[serde(default = "default_eval_cap")]
    pub eval_window_cap: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_horizon() -> u32 {
    mobgpt_core::DEFAULT_HORIZON_DAY
}
fn default_heldout() -> usize {
    10
}
fn default_one() -> u64 {
    1
}
fn default_day_max() -> u32 {
    mobgpt_core::DATASET_DAYS
}
fn default_eval_cap() -> usize {
    64
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config `{}`: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("bad config `{}`: {e}", path.display()))
    }

    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("resolved_config.json"),
            serde_json::to_string_pretty(self).expect("config serializes"),
        )
    }
}
