//! JSON experiment configuration and its flag overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use modiff::diffusion::{QuantMode, SamplerKind};
use modiff::train::TrainConfig;
use modiff::verify::VerifyConfig;
use modiff::{Granularity, Rounding};

use crate::CliError;

pub const SEED_ENV: &str = "MODIFF_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Explicit seed list; when absent, `num_seeds` consecutive seeds from
    /// the base seed.
    pub seeds: Option<Vec<u64>>,
    pub num_seeds: u64,
    pub modes: Vec<QuantMode>,
    pub bits: Vec<u32>,
    pub sampler: SamplerKind,
    pub samples: usize,
    pub skip_threshold: f64,
    pub weight_bits: u32,
    pub rounding: Rounding,
    pub granularity: Granularity,
    pub out: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: None,
            num_seeds: 20,
            modes: vec![QuantMode::Direct, QuantMode::Modulated, QuantMode::Ec],
            bits: vec![3, 4, 6],
            sampler: SamplerKind::Ddim,
            samples: 64,
            skip_threshold: 0.0,
            weight_bits: 8,
            rounding: Rounding::Nearest,
            granularity: Granularity::ChannelWise { axis: 1 },
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub sampler: SamplerKind,
    pub samples: usize,
    pub out: Option<PathBuf>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            samples: 64,
            out: None,
        }
    }
}

/// Raw file contents. The `train` section is kept as JSON and laid over
/// [`TrainConfig::reference`] so partial sections inherit its values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    bundle: Option<PathBuf>,
    schedule: ScheduleConfig,
    train: Option<Value>,
    train_out: Option<PathBuf>,
    sweep: SweepConfig,
    verify: VerifyConfig,
    stats: StatsConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Base seed after flag, file and environment resolution.
    pub seed: u64,
    pub bundle: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub train_out: PathBuf,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
    pub stats: StatsConfig,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and resolves the base seed as
    /// flag, then file, then `MODIFF_SEED`, then 0.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let raw: RawConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("invalid config {}: {e}", p.display())))?
            }
            None => RawConfig::default(),
        };
        let seed = match seed_flag.or(raw.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        let mut train_value = serde_json::to_value(TrainConfig::reference())
            .expect("train config serializes");
        if let Some(overlay) = raw.train {
            merge(&mut train_value, overlay);
        }
        let mut train: TrainConfig = serde_json::from_value(train_value)
            .map_err(|e| CliError::config(format!("invalid train section: {e}")))?;
        train.seed = seed;
        let mut verify = raw.verify;
        verify.seed = seed;
        Ok(Self {
            seed,
            bundle: raw.bundle,
            schedule: raw.schedule,
            train,
            train_out: raw.train_out.unwrap_or_else(|| PathBuf::from("bundle")),
            sweep: raw.sweep,
            verify,
            stats: raw.stats,
        })
    }

    pub fn sweep_seeds(&self, seed_flag: Option<u64>) -> Vec<u64> {
        if let Some(s) = seed_flag {
            return vec![s];
        }
        match &self.sweep.seeds {
            Some(list) => list.clone(),
            None => (0..self.sweep.num_seeds).map(|i| self.seed + i).collect(),
        }
    }
}

/// Comma-separated list parsing shared by `--bits`, `--mode` and `--dims`.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CliError::config(format!("invalid {what} entry {s:?}")))
        })
        .collect()
}
