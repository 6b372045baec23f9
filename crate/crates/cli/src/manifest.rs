//! Run manifest written next to every output directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dyna_loco::config::TrainConfig;
use dyna_loco::env::{DEFAULT_MIX_LIN, DEFAULT_MIX_YAW, OBS_DIM, PHYS_DIM};
use dyna_loco::experiment::{HEATMAP_HEADER, METRICS_HEADER};
use dyna_loco::policy::{LOG_STD_MAX, LOG_STD_MIN};
use dyna_loco::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    /// TOML snapshot of the effective configuration.
    pub config: String,
    pub constants_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub package_version: String,
}

/// SHA-256 over the compiled-in constants that shape outputs.
pub fn constants_hash() -> String {
    let text = format!(
        "{METRICS_HEADER}\n{HEATMAP_HEADER}\nobs={OBS_DIM} phys={PHYS_DIM}\nmix_lin={DEFAULT_MIX_LIN:?}\nmix_yaw={DEFAULT_MIX_YAW:?}\nlog_std=[{LOG_STD_MIN},{LOG_STD_MAX}]\n"
    );
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, cfg: &TrainConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            seed: cfg.run.seed,
            config: cfg.to_toml_string(),
            constants_hash: constants_hash(),
            started_unix: unix_now(),
            finished_unix: None,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml_str(&self.config)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Invalid(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("manifest format {} unsupported", m.format_version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_manifest() {
        let mut cfg = TrainConfig::default();
        cfg.run.seed = 11;
        cfg.scheduler.y = 2;
        cfg.scheduler.b = 500;
        cfg.threshold.delta = Some(12.25);
        let dir = tempfile::tempdir().unwrap();
        RunManifest::new("train", &cfg).write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back.config().unwrap(), cfg);
        assert_eq!(back.seed, 11);
        assert_eq!(back.constants_hash.len(), 64);
    }

    #[test]
    fn constants_hash_is_stable() {
        assert_eq!(constants_hash(), constants_hash());
    }
}
