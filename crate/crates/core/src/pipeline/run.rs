//! Settings files and the resolved configuration recorded with every run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::read_file;
use super::synthetic::SyntheticConfig;
use crate::depstats::StatsConfig;
use crate::error::{Error, Result};
use crate::evalsuite::EvalConfig;
use crate::losses::LossConfig;
use crate::trainer::{AttackMode, TrainConfig};
use crate::victims::{RenderConfig, VictimMeta, VictimTrainConfig};

/// Contents of a `--config` file; every section and field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub victims: VictimTrainConfig,
    pub render: RenderConfig,
    pub synthetic: SyntheticConfig,
    pub stats: StatsConfig,
    /// Fraction of labeled entries held out for validation when the manifest has no split tags.
    pub holdout_fraction: Option<f64>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
    }

    pub fn holdout(&self) -> f64 {
        self.holdout_fraction.unwrap_or(0.2)
    }
}

/// Everything needed to repeat a run, written as `run_config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: Option<PathBuf>,
    pub mode: Option<AttackMode>,
    pub target: Option<String>,
    pub victim_meta: Option<VictimMeta>,
    pub settings: Settings,
    /// Command-specific arguments.
    pub args: BTreeMap<String, String>,
    /// SHA-256 of every input file, keyed by role.
    pub input_hashes: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, output_dir: &Path, settings: &Settings) -> Self {
        Self {
            command: command.to_string(),
            seed,
            output_dir: output_dir.to_path_buf(),
            dataset: None,
            mode: None,
            target: None,
            victim_meta: None,
            settings: settings.clone(),
            args: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
        }
    }
}
