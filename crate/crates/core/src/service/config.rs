use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::engine::StabilityConfig;
use crate::forecast::{check_alpha, DEFAULT_ALPHA};
use crate::inventory::ChemicalRecord;
use crate::telemetry::{Calibration, TagId, TrayId, FRAME_SCHEMA};

pub const CONFIG_SCHEMA: u32 = 1;
pub const API_SCHEMA: u32 = 1;
pub const SNAPSHOT_SCHEMA: u32 = 1;

/// Container enrolled from the config file on startup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSeed {
    pub tag_id: TagId,
    pub chemical_id: String,
    pub tare_g: f64,
    pub gross_g: f64,
}

/// Service configuration file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "config_schema")]
    pub schema: u32,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Relative paths are resolved against the config file's directory.
    pub data_dir: PathBuf,
    /// Built dashboard assets served at `/`, if present.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default = "default_alpha")]
    pub forecast_alpha: f64,
    #[serde(default = "frame_schema")]
    pub frame_schema: u32,
    #[serde(default)]
    pub stability: StabilityConfig,
    /// Known trays and their load-cell calibration.
    pub trays: BTreeMap<TrayId, Calibration>,
    #[serde(default)]
    pub chemicals: Vec<ChemicalRecord>,
    #[serde(default)]
    pub containers: Vec<ContainerSeed>,
}

fn config_schema() -> u32 {
    CONFIG_SCHEMA
}

fn frame_schema() -> u32 {
    FRAME_SCHEMA
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            schema: CONFIG_SCHEMA,
            listen: default_listen(),
            data_dir: data_dir.into(),
            static_dir: None,
            forecast_alpha: DEFAULT_ALPHA,
            frame_schema: FRAME_SCHEMA,
            stability: StabilityConfig::default(),
            trays: BTreeMap::new(),
            chemicals: Vec::new(),
            containers: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if let Some(s) = cfg.static_dir.as_mut() {
            if s.is_relative() {
                *s = base.join(&*s);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.schema != CONFIG_SCHEMA {
            return bad(format!("unsupported config schema {} (expected {CONFIG_SCHEMA})", self.schema));
        }
        if self.frame_schema != FRAME_SCHEMA {
            return bad(format!("unsupported frame schema {} (expected {FRAME_SCHEMA})", self.frame_schema));
        }
        self.stability
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        check_alpha(self.forecast_alpha).map_err(|e| ServiceError::Config(e.to_string()))?;
        if self.trays.is_empty() {
            return bad("at least one tray must be configured under [trays]".to_string());
        }
        for c in &self.containers {
            if !c.tag_id.is_container() {
                return bad(format!("container seed {} is not a container tag", c.tag_id));
            }
        }
        Ok(())
    }

    pub fn calibration(&self, tray: &TrayId) -> Option<&Calibration> {
        self.trays.get(tray)
    }
}
