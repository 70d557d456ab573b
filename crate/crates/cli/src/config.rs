use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use scai::train::{GridSpec, TrainConfig};
use scai::ScaiConfig;
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with from a TOML file. Command-line
/// flags are applied on top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ScaiConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub sweep: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub per_class: usize,
    /// Recipe TOML; the built-in recipes when absent.
    pub recipes: Option<PathBuf>,
    pub split: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            per_class: 100,
            recipes: None,
            split: vec![8, 1, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Budgets as fractions of the last exit's static cost (per sample for
    /// anytime curves, times the test-set size for budgeted curves).
    pub budget_fractions: Vec<f64>,
    /// Batch budget fraction used to calibrate thresholds for `simulate`.
    pub simulate_fraction: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            budget_fractions: (1..=20).map(|i| i as f64 * 0.05).collect(),
            simulate_fraction: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Init = 3,
    Train = 4,
    Simulate = 5,
}

pub fn stream_seed(master: u64, stream: Stream) -> u64 {
    scai::synth::sample_seed(master, stream as u64)
}
