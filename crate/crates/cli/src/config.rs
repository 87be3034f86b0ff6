//! Run configuration: one TOML file, every field optional, overridden by
//! command-line flags.
//!
//! ```toml
//! seed = 3
//! model = "toy"
//!
//! [paths]
//! corpus = "corpus.jsonl"
//! out_dir = "runs"
//!
//! [train]
//! epochs = 10
//!
//! [rollout]
//! horizons = [2, 4, 6, 8]
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use rtgnn::gnn::GnnConfig;
use rtgnn::scenario::{ScenarioKind, ScenarioSpec};
use rtgnn::training::TrainConfig;
use serde::Deserialize;

use crate::Usage;

pub const OUT_DIR_ENV: &str = "RTGNN_OUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    #[default]
    Default,
    /// 9x9 lattice and slim encoders.
    Toy,
}

impl ModelSize {
    pub fn config(self) -> GnnConfig {
        match self {
            ModelSize::Default => GnnConfig::default(),
            ModelSize::Toy => GnnConfig::toy(),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub sequences: usize,
    pub kinds: Vec<ScenarioKind>,
    pub vehicles: Option<[usize; 2]>,
    pub speed: Option<[f64; 2]>,
    pub steps: Option<usize>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            sequences: 500,
            kinds: ScenarioKind::ALL.to_vec(),
            vehicles: None,
            speed: None,
            steps: None,
        }
    }
}

impl GenerateSettings {
    pub fn specs(&self) -> Vec<ScenarioSpec> {
        self.kinds
            .iter()
            .map(|&k| {
                let base = ScenarioSpec::new(k);
                ScenarioSpec {
                    vehicles: self.vehicles.unwrap_or(base.vehicles),
                    speed: self.speed.unwrap_or(base.speed),
                    steps: self.steps.unwrap_or(base.steps),
                    kind: k,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSettings {
    /// Prediction horizon in steps.
    pub horizon: usize,
    pub samples: usize,
    pub k: usize,
    /// Evaluation horizons in steps.
    pub horizons: Vec<usize>,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self {
            horizon: 8,
            samples: 5,
            k: 5,
            horizons: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelSize,
    pub paths: Paths,
    pub generate: GenerateSettings,
    pub train: TrainConfig,
    pub rollout: RolloutSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_input(path)?;
        let text = String::from_utf8(text).with_context(|| format!("{} is not UTF-8", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    /// Flag, then config file, then `RTGNN_OUT_DIR`, then the working
    /// directory.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }
}

/// Reads a whole input file; a missing file is a usage error.
pub fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Usage(format!("no such file: {}", path.display())).into());
    }
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// The flag value or the config value, or a usage error naming the flag.
pub fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Usage(format!("missing --{name} (or paths.{name} in the config)")).into())
}
