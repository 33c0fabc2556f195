//! Scenario-driven tray simulator.
//!
//! A [`ScenarioScript`] describes one tray: its empty weight, sampling rate,
//! sensor imperfections and a timed list of physical actions. The
//! [`Simulator`] turns it into the telemetry frames a real tray would send,
//! and [`ground_truth`] reads the expected operation events straight off the
//! action list.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! schema = 1
//! tray_id = "T1"
//! base_weight_g = 500.0
//! sample_rate_hz = 10.0
//! duration_s = 30.0
//! seed = 7
//!
//! [noise]
//! weight_sigma_g = 0.2
//! tag_read_prob = 0.95
//! spurious_tag_prob = 0.0
//!
//! [[actions]]
//! time_s = 2.0
//! kind = "place"
//! tag_id = "A"        # bare names mean container tags, i.e. "C:A"
//! gross_g = 150.0
//! settle_s = 1.0
//! badge = "U:alice"   # optional
//! ```

mod sim;
mod workload;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{TagId, TrayId};

pub use sim::{ground_truth, run, Simulator, TruthEvent};
pub use workload::{generate_workload, SeedContainer, Workload, WorkloadParams};

pub const SCENARIO_SCHEMA: u32 = 1;

/// Default epoch for frame timestamps: 2024-01-01T00:00:00Z.
pub const DEFAULT_START_MS: i64 = 1_704_067_200_000;

/// Container tags in this namespace are emitted only as spurious reads.
pub const GHOST_PREFIX: &str = "C:ghost.";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario: {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub weight_sigma_g: f64,
    pub tag_read_prob: f64,
    pub spurious_tag_prob: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            weight_sigma_g: 0.2,
            tag_read_prob: 0.95,
            spurious_tag_prob: 0.0,
        }
    }
}

impl NoiseModel {
    /// No weight noise, perfect tag reads.
    pub fn noiseless() -> Self {
        NoiseModel {
            weight_sigma_g: 0.0,
            tag_read_prob: 1.0,
            spurious_tag_prob: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Place,
    Remove,
    DispenseInPlace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptAction {
    pub time_s: f64,
    pub kind: ActionKind,
    #[serde(deserialize_with = "de_container_tag")]
    pub tag_id: TagId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gross_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_g: Option<f64>,
    #[serde(default)]
    pub settle_s: f64,
    /// User badge read by the tray while the action takes place.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub badge: Option<TagId>,
}

fn de_container_tag<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TagId, D::Error> {
    let s = String::deserialize(d)?;
    if s.contains(':') {
        TagId::parse(s).map_err(serde::de::Error::custom)
    } else {
        TagId::parse(format!("C:{s}")).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub schema: u32,
    pub tray_id: TrayId,
    pub base_weight_g: f64,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// Epoch of frame 0.
    #[serde(default = "default_start")]
    pub start_ms: i64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub actions: Vec<ScriptAction>,
}

fn default_start() -> i64 {
    DEFAULT_START_MS
}

impl ScenarioScript {
    /// Empty tray with default noise and no actions.
    pub fn new(tray_id: TrayId, base_weight_g: f64, sample_rate_hz: f64, duration_s: f64) -> Self {
        ScenarioScript {
            schema: SCENARIO_SCHEMA,
            tray_id,
            base_weight_g,
            sample_rate_hz,
            duration_s,
            seed: 0,
            start_ms: DEFAULT_START_MS,
            noise: NoiseModel::default(),
            actions: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let script: ScenarioScript = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            ScenarioError::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        script.validate()?;
        Ok(script)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialization")
    }

    /// Number of frames the scenario produces.
    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.sample_rate_hz).round() as u64
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(invalid("schema", format!("unsupported schema {}", self.schema)));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(invalid("sample_rate_hz", "must be positive"));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(invalid("duration_s", "must be non-negative"));
        }
        if !(self.base_weight_g.is_finite() && self.base_weight_g >= 0.0) {
            return Err(invalid("base_weight_g", "must be non-negative"));
        }
        let n = &self.noise;
        if !(n.weight_sigma_g.is_finite() && n.weight_sigma_g >= 0.0) {
            return Err(invalid("noise.weight_sigma_g", "must be non-negative"));
        }
        for (name, p) in [
            ("noise.tag_read_prob", n.tag_read_prob),
            ("noise.spurious_tag_prob", n.spurious_tag_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, "probability outside [0, 1]"));
            }
        }

        let mut on_tray: BTreeMap<&TagId, f64> = BTreeMap::new();
        let mut last_time = f64::NEG_INFINITY;
        for (i, a) in self.actions.iter().enumerate() {
            let field = |f: &str| format!("actions[{i}].{f}");
            if !(a.time_s.is_finite() && (0.0..=self.duration_s).contains(&a.time_s)) {
                return Err(invalid(field("time_s"), "outside [0, duration_s]"));
            }
            if a.time_s < last_time {
                return Err(invalid(field("time_s"), "actions not sorted by time"));
            }
            last_time = a.time_s;
            if !(a.settle_s.is_finite() && a.settle_s >= 0.0) {
                return Err(invalid(field("settle_s"), "must be non-negative"));
            }
            if !a.tag_id.is_container() || a.tag_id.as_str().starts_with(GHOST_PREFIX) {
                return Err(invalid(field("tag_id"), "must be a non-reserved container tag"));
            }
            if a.badge.as_ref().is_some_and(|b| b.is_container()) {
                return Err(invalid(field("badge"), "must be a `U:` badge tag"));
            }
            match a.kind {
                ActionKind::Place => {
                    let g = a.gross_g.ok_or_else(|| invalid(field("gross_g"), "required for place"))?;
                    if !(g.is_finite() && g > 0.0) {
                        return Err(invalid(field("gross_g"), "must be positive"));
                    }
                    if on_tray.insert(&a.tag_id, g).is_some() {
                        return Err(invalid(field("tag_id"), "place of tag already on tray"));
                    }
                }
                ActionKind::Remove => {
                    if on_tray.remove(&a.tag_id).is_none() {
                        return Err(invalid(field("tag_id"), "remove of absent tag"));
                    }
                }
                ActionKind::DispenseInPlace => {
                    let d = a.delta_g.ok_or_else(|| invalid(field("delta_g"), "required for dispense_in_place"))?;
                    let g = on_tray
                        .get_mut(&a.tag_id)
                        .ok_or_else(|| invalid(field("tag_id"), "dispense on absent tag"))?;
                    if !d.is_finite() || *g + d <= 0.0 {
                        return Err(invalid(field("delta_g"), "would leave a non-positive gross"));
                    }
                    *g += d;
                }
            }
        }
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioScript, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioScript::from_toml(&text)
}
