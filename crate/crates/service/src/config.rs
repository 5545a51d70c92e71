use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zonegate_core::{Mode, ZonePolicy};

use crate::ServiceError;

/// Service settings, read from a JSON file.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub policy_path: PathBuf,
    #[serde(default = "default_ttl")]
    pub offer_ttl_s: f64,
    pub log_path: PathBuf,
    /// Overrides the mode in the policy file.
    #[serde(default)]
    pub mode: Option<Mode>,
    /// Write a snapshot every this many records; 0 disables snapshots.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    /// Unix time of the start of slot 0. When set, requests for slots that
    /// have already started are refused.
    #[serde(default)]
    pub horizon_start_unix_s: Option<f64>,
    /// fsync the log after every append.
    #[serde(default)]
    pub fsync: bool,
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_ttl() -> f64 {
    zonegate_core::ledger::DEFAULT_OFFER_TTL_S
}

fn default_snapshot_every() -> u64 {
    1000
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut config: ServiceConfig = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.policy_path, &mut config.log_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.offer_ttl_s > 0.0 && self.offer_ttl_s.is_finite()) {
            return Err(ServiceError::Config("offer_ttl_s must be > 0".into()));
        }
        Ok(())
    }

    /// The zone policy file with the mode override applied.
    pub fn load_policy(&self) -> Result<ZonePolicy, ServiceError> {
        let text = std::fs::read_to_string(&self.policy_path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", self.policy_path.display())))?;
        let mut policy: ZonePolicy = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", self.policy_path.display())))?;
        if let Some(mode) = self.mode {
            policy.mode = mode;
        }
        policy.validate()?;
        Ok(policy)
    }

    pub fn snapshot_path(&self) -> PathBuf {
        snapshot_path_for(&self.log_path)
    }
}

/// `events.jsonl` snapshots to `events.jsonl.snapshot`.
pub fn snapshot_path_for(log_path: &Path) -> PathBuf {
    let mut name = log_path.as_os_str().to_owned();
    name.push(".snapshot");
    PathBuf::from(name)
}
