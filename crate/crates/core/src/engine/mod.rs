//! Take/return event detection for a single tray.
//!
//! Each tray gets a [`TrayTracker`]. While the tray is quiet the tracker holds
//! a baseline weight and the debounced set of container tags on it. Weight
//! instability puts the tracker into a pending window; tags seen during the
//! window are accumulated, and once the weight settles again the difference
//! between the new stable weight and the baseline is matched against the
//! tags that left or arrived (see [`classify`]).

mod classify;
mod debounce;
mod stability;
mod tracker;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{TagId, TrayId};

pub use classify::{classify, Settled, MULTI_TAG_TOLERANCE_G};
pub use debounce::{debounce, TagDebouncer};
pub use stability::{is_creeping, is_stable, stable_weight};
pub use tracker::{PendingWindow, TrackerMode, TrayTracker};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("invalid stability config: {0}")]
    InvalidConfig(String),
    #[error("frame for tray {got} routed to tracker for {expected}")]
    TrayMismatch { expected: TrayId, got: TrayId },
}

/// Thresholds for stability and tag debouncing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    /// Samples in the stability window.
    pub window_frames: usize,
    /// Largest max-min spread of a stable window, grams.
    pub stable_range_g: f64,
    /// Weight change that counts as an operation, grams.
    pub trigger_delta_g: f64,
    /// Consecutive misses before a present tag is declared absent.
    pub tag_absent_scans: u32,
    /// Consecutive hits before an absent tag is declared present.
    pub tag_present_scans: u32,
    pub pending_timeout_s: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            window_frames: 10,
            stable_range_g: 0.5,
            trigger_delta_g: 1.0,
            tag_absent_scans: 3,
            tag_present_scans: 2,
            pending_timeout_s: 120.0,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.window_frames == 0 {
            return bad("window_frames must be positive");
        }
        if !(self.stable_range_g > 0.0 && self.stable_range_g.is_finite()) {
            return bad("stable_range_g must be positive");
        }
        if !(self.trigger_delta_g.is_finite() && self.trigger_delta_g >= self.stable_range_g) {
            return bad("trigger_delta_g must be at least stable_range_g");
        }
        if self.tag_absent_scans == 0 || self.tag_present_scans == 0 {
            return bad("tag scan counts must be positive");
        }
        if !(self.pending_timeout_s > 0.0) {
            return bad("pending_timeout_s must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Remove,
    Return,
    Adjust,
    Ambiguous,
    Anomaly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyReason {
    /// Tag change and weight change disagree in sign.
    SignContradiction,
    /// Weight changed with no container tag on the tray.
    NoContainer,
    /// Weight never settled within the pending timeout.
    PendingTimeout,
}

/// How a candidate tag changed during an ambiguous window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRole {
    Removed,
    Returned,
    Present,
}

/// Classified outcome of one pending window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationEvent {
    pub tray_id: TrayId,
    /// Per-tray event counter, starting at 1.
    pub tray_event_seq: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_id: Option<TagId>,
    pub delta_g: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub candidates: BTreeMap<TagId, CandidateRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_badge: Option<TagId>,
    pub t_start_ms: i64,
    pub t_end_ms: i64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unregistered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalyReason>,
}

/// Last-known gross weight of registered containers.
pub trait GrossLookup {
    fn last_known_gross(&self, tag: &TagId) -> Option<f64>;
}

impl GrossLookup for HashMap<TagId, f64> {
    fn last_known_gross(&self, tag: &TagId) -> Option<f64> {
        self.get(tag).copied()
    }
}

impl GrossLookup for BTreeMap<TagId, f64> {
    fn last_known_gross(&self, tag: &TagId) -> Option<f64> {
        self.get(tag).copied()
    }
}

/// Registry that knows no containers.
pub struct NoRegistry;

impl GrossLookup for NoRegistry {
    fn last_known_gross(&self, _: &TagId) -> Option<f64> {
        None
    }
}
