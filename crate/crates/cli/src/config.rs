//! Run configuration: one optional section per subcommand, loaded from TOML
//! or from a previous run's manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routelab::diffusion::{ModelConfig, TrainConfig};
use routelab::scheduler::DEFAULT_SIGMA;
use routelab::sim::{StepCostModel, DEFAULT_ZIPF_S, REFERENCE_TOKENS_PER_STEP};
use routelab::{CapacitySchedule, SchedulerKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub route: RouteSettings,
    pub schedule_check: ScheduleSettings,
    pub train: TrainSettings,
    pub retrofit: RetrofitSettings,
    pub analyze: AnalyzeSettings,
    pub simulate: SimulateSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteSettings {
    pub demo: bool,
    pub scores: Option<PathBuf>,
    /// Random `tokens x experts` matrix drawn from the run seed.
    pub random: Option<(usize, usize)>,
    pub policy: Option<String>,
    pub k: Option<usize>,
    pub c: Option<usize>,
    pub cf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSettings {
    pub k_min: f64,
    pub k_max: f64,
    pub sigma: f64,
    /// Defaults to the midpoint of `k_min` and `k_max`.
    pub baseline: Option<f64>,
    pub kinds: Vec<SchedulerKind>,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            k_min: 8.0,
            k_max: 32.0,
            sigma: DEFAULT_SIGMA,
            baseline: None,
            kinds: SchedulerKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub n_train: usize,
    pub n_eval: usize,
    pub seq_len: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            n_train: 2048,
            n_eval: 256,
            seq_len: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelConfig,
    /// `seed` here is overwritten by a stream derived from the run seed.
    pub optim: TrainConfig,
    pub data: DataSettings,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrofitSettings {
    pub checkpoint: Option<PathBuf>,
    /// Dynamic EC capacity; without it EC keeps the TC top-k (or `k`).
    pub schedule: Option<CapacitySchedule>,
    pub k: Option<f64>,
    pub finetune_steps: u64,
    /// Also continue the unmodified TC model for the same number of steps.
    pub baseline: bool,
    pub data: DataSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSettings {
    /// First trace is analysed; a second one is the static baseline for the
    /// rate-ratio table.
    pub traces: Vec<PathBuf>,
    pub stages: Option<Vec<(u64, u64)>>,
    pub geometric: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub n_experts: usize,
    pub n_devices: usize,
    pub k: usize,
    pub cfs: Vec<f64>,
    /// Zipf exponent of the router-score skew; 0 means uniform scores.
    pub skew: f64,
    pub n_tokens: usize,
    pub n_steps: usize,
    /// Include the dropless TC variants.
    pub dropless: bool,
    pub cost: StepCostModel,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            n_experts: 64,
            n_devices: 8,
            k: 8,
            cfs: vec![1.0, 1.25, 1.5],
            skew: DEFAULT_ZIPF_S,
            n_tokens: REFERENCE_TOKENS_PER_STEP,
            n_steps: 50,
            dropless: true,
            cost: StepCostModel::default(),
        }
    }
}

/// Written next to every run's outputs. Feeding it back through `--config`
/// reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub format_version: u32,
    pub subcommand: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
}

impl RunConfig {
    /// TOML config, or a JSON manifest whose section is restored for its
    /// subcommand.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
            let mut cfg = RunConfig {
                seed: m.seed,
                ..RunConfig::default()
            };
            let c = m.config;
            match m.subcommand.as_str() {
                "route" => cfg.route = serde_json::from_value(c)?,
                "schedule-check" => cfg.schedule_check = serde_json::from_value(c)?,
                "train" => cfg.train = serde_json::from_value(c)?,
                "retrofit" => cfg.retrofit = serde_json::from_value(c)?,
                "analyze" => cfg.analyze = serde_json::from_value(c)?,
                "simulate" => cfg.simulate = serde_json::from_value(c)?,
                other => bail!("manifest names unknown subcommand '{other}'"),
            }
            Ok(cfg)
        } else {
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

/// Independent seed for one consumer of the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const WORKLOAD: u64 = 4;
    pub const SCORES: u64 = 5;
}
