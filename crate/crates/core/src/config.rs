//! Experiment configuration: a sectioned key-value (TOML) file plus dotted
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dyna::{ModelConfig, SchedulerConfig, DEFAULT_MAX_SYNTHETIC};
use crate::env::EnvParams;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::ppo::PpoHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parallel environments `K`.
    pub envs: usize,
    /// Total rollout length `N = N_r + N_s`.
    pub rollout: usize,
    /// Step budget counting simulated and synthetic steps.
    pub budget: u64,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Stop as soon as the mean return reaches `threshold.delta`.
    pub stop_at_threshold: bool,
    /// Spread the first episode of each environment over the episode length.
    pub randomize_phase: bool,
    /// Mean return is taken over this many most recent completed episodes;
    /// 0 restricts it to episodes completed within the iteration.
    pub return_window: usize,
    /// Record wall-clock seconds in the metrics CSV (makes it non-reproducible).
    pub log_wall_time: bool,
    /// Upper bound on `scheduler.y`.
    pub max_synthetic: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            envs: 16,
            rollout: 24,
            budget: 2_000_000,
            checkpoint_every: 50,
            stop_at_threshold: false,
            randomize_phase: true,
            return_window: 0,
            log_wall_time: false,
            max_synthetic: DEFAULT_MAX_SYNTHETIC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 128], activation: Activation::Elu, init_log_std: 0.5f64.ln() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    /// Return threshold for steps-to-threshold; absent until calibrated.
    pub delta: Option<f64>,
}

/// Reference run used to derive the desk threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub budget: u64,
    /// Threshold as a fraction of the reference run's late mean return.
    pub fraction: f64,
    /// Trailing fraction of iterations averaged as the reference return.
    pub tail: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { budget: 4_000_000, fraction: 0.85, tail: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub vx: Vec<f64>,
    pub wz: Vec<f64>,
    pub trials: usize,
    pub warmup: usize,
    pub measure: usize,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        let grid = |lo: f64, hi: f64| (0..9).map(|i| lo + (hi - lo) * i as f64 / 8.0).collect();
        Self { vx: grid(-1.0, 1.0), wz: grid(-1.0, 1.0), trials: 3, warmup: 50, measure: 250 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub scheduler: SchedulerConfig,
    pub env: EnvParams<f64>,
    pub ppo: PpoHyper,
    pub policy: PolicyConfig,
    pub model: ModelConfig,
    pub threshold: ThresholdConfig,
    pub calibration: CalibrationConfig,
    pub heatmap: HeatmapConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            scheduler: SchedulerConfig::DISABLED,
            env: EnvParams::default(),
            ppo: PpoHyper::default(),
            policy: PolicyConfig::default(),
            model: ModelConfig::default(),
            threshold: ThresholdConfig::default(),
            calibration: CalibrationConfig::default(),
            heatmap: HeatmapConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let run = &self.run;
        if run.envs == 0 || run.rollout == 0 {
            return Err(Error::Config("run.envs and run.rollout must be >= 1".into()));
        }
        let per_iter = (run.envs * run.rollout) as u64;
        if run.budget < per_iter {
            return Err(Error::Config(format!(
                "run.budget {} is smaller than one iteration (K*N = {per_iter})",
                run.budget
            )));
        }
        self.scheduler.validate(run.rollout, run.max_synthetic)?;
        self.env.validate()?;
        self.ppo.validate()?;
        crate::nn::MlpSpec::new(1, self.policy.hidden.clone(), 1).validate()?;
        if !self.policy.init_log_std.is_finite() {
            return Err(Error::Config("policy.init_log_std must be finite".into()));
        }
        if !self.scheduler.is_disabled() {
            self.model.validate()?;
        }
        if let Some(d) = self.threshold.delta {
            if !d.is_finite() {
                return Err(Error::Config("threshold.delta must be finite".into()));
            }
        }
        if run.stop_at_threshold && self.threshold.delta.is_none() {
            return Err(Error::Config("run.stop_at_threshold requires threshold.delta".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Load a file and apply `section.key=value` overrides in order.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?.try_into().map_err(
                |e: toml::de::Error| Error::Config(e.to_string()),
            )?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

/// Set `a.b.c=value` in a TOML table. The value is parsed as a TOML literal
/// and falls back to a plain string. A key without a section (`seed=1`)
/// addresses the `run` section.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let mut path: Vec<&str> = key.split('.').collect();
    if path.len() == 1 {
        path.insert(0, "run");
    }
    if key.is_empty() || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
