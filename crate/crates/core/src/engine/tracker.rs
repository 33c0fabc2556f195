use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    classify, is_creeping, is_stable, stable_weight, AnomalyReason, EngineError, EventKind, GrossLookup,
    OperationEvent, Settled, StabilityConfig, TagDebouncer,
};
use crate::telemetry::{TagId, TelemetryFrame, TrayId};

/// Open operation on a tray, from first instability until the weight settles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingWindow {
    pub tray_id: TrayId,
    pub started_at_ms: i64,
    /// Baseline weight when the window opened.
    pub w0: f64,
    pub tags_before: BTreeSet<TagId>,
    /// Every container tag read while pending, debounced or not.
    pub tags_seen: BTreeSet<TagId>,
    pub badge_seen: Option<TagId>,
    /// Every tag the debouncer held present at some point while pending.
    #[serde(default)]
    pub tags_latched: BTreeSet<TagId>,
    /// Frames lost to sequence gaps while pending.
    pub lost_frames: u64,
    /// Last quiet weight level reached inside the window, starting at `w0`.
    pub level_g: f64,
    /// Times the weight moved to a new quiet level more than
    /// `trigger_delta_g` away from the previous one.
    pub steps: u32,
}

impl PendingWindow {
    /// Records a quiet window (range within `trigger_delta_g`) and counts it
    /// as a step when its mean left the previous level.
    fn track_level(&mut self, window: &[f64], cfg: &StabilityConfig) {
        if window.len() < cfg.window_frames {
            return;
        }
        let w = &window[window.len() - cfg.window_frames..];
        let (lo, hi) = w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if hi - lo > cfg.trigger_delta_g {
            return;
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        if (mean - self.level_g).abs() > cfg.trigger_delta_g {
            self.steps += 1;
            self.level_g = mean;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrackerMode {
    /// No stable baseline yet.
    Warmup,
    Idle,
    Pending(PendingWindow),
}

/// Per-tray detector state. One writer per tray; frames must arrive in
/// sequence order (stale ones are counted and dropped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrayTracker {
    tray_id: TrayId,
    mode: TrackerMode,
    baseline_weight_g: Option<f64>,
    baseline_tags: BTreeSet<TagId>,
    window: Vec<f64>,
    debouncer: TagDebouncer,
    /// Frames since the debounced tag set last changed.
    #[serde(default)]
    tags_steady_frames: u64,
    last_seq: Option<u64>,
    last_timestamp_ms: Option<i64>,
    stale_frames: u64,
    lost_frames: u64,
    events_emitted: u64,
}

impl TrayTracker {
    pub fn new(tray_id: TrayId) -> Self {
        TrayTracker {
            tray_id,
            mode: TrackerMode::Warmup,
            baseline_weight_g: None,
            baseline_tags: BTreeSet::new(),
            window: Vec::new(),
            debouncer: TagDebouncer::default(),
            tags_steady_frames: 0,
            last_seq: None,
            last_timestamp_ms: None,
            stale_frames: 0,
            lost_frames: 0,
            events_emitted: 0,
        }
    }

    pub fn tray_id(&self) -> &TrayId {
        &self.tray_id
    }

    pub fn mode(&self) -> &TrackerMode {
        &self.mode
    }

    pub fn is_pending(&self) -> bool {
        matches!(self.mode, TrackerMode::Pending(_))
    }

    pub fn baseline_weight(&self) -> Option<f64> {
        self.baseline_weight_g
    }

    pub fn baseline_tags(&self) -> &BTreeSet<TagId> {
        &self.baseline_tags
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.last_seq
    }

    /// Frames dropped because their seq did not advance.
    pub fn stale_frames(&self) -> u64 {
        self.stale_frames
    }

    /// Frames never received, inferred from seq gaps.
    pub fn lost_frames(&self) -> u64 {
        self.lost_frames
    }

    pub fn events_emitted(&self) -> u64 {
        self.events_emitted
    }

    /// Continues per-tray event numbering after `n`, for a tracker rebuilt
    /// without its saved state.
    pub fn resume_numbering(&mut self, n: u64) {
        self.events_emitted = self.events_emitted.max(n);
    }

    pub fn observe_frame(
        &mut self,
        frame: &TelemetryFrame,
        cfg: &StabilityConfig,
        registry: &dyn GrossLookup,
    ) -> Result<Vec<OperationEvent>, EngineError> {
        if frame.tray_id != self.tray_id {
            return Err(EngineError::TrayMismatch {
                expected: self.tray_id.clone(),
                got: frame.tray_id.clone(),
            });
        }
        if let Some(last) = self.last_seq {
            if frame.seq <= last {
                self.stale_frames += 1;
                return Ok(Vec::new());
            }
            let lost = frame.seq - last - 1;
            self.lost_frames += lost;
            if let TrackerMode::Pending(p) = &mut self.mode {
                p.lost_frames += lost;
            }
        }
        self.last_seq = Some(frame.seq);
        self.last_timestamp_ms = Some(frame.timestamp_ms);

        let tags_changed = self.debouncer.observe(frame.container_tags(), cfg);
        if tags_changed {
            self.tags_steady_frames = 0;
        } else {
            self.tags_steady_frames += 1;
        }
        if self.window.len() >= cfg.window_frames {
            self.window.drain(..=self.window.len() - cfg.window_frames);
        }
        self.window.push(frame.weight_g);
        let badge = frame.tags.iter().filter(|t| !t.is_container()).max();

        let Some(baseline) = self.baseline_weight_g else {
            if is_stable(&self.window, cfg) {
                self.baseline_weight_g = Some(stable_weight(&self.window, cfg));
                self.baseline_tags = self.debouncer.present();
                self.mode = TrackerMode::Idle;
            }
            return Ok(Vec::new());
        };

        if matches!(self.mode, TrackerMode::Idle) {
            let unstable = !is_stable(&self.window, cfg);
            let moved = (frame.weight_g - baseline).abs() > cfg.trigger_delta_g;
            if !(unstable || moved) {
                return Ok(Vec::new());
            }
            self.mode = TrackerMode::Pending(PendingWindow {
                tray_id: self.tray_id.clone(),
                started_at_ms: frame.timestamp_ms,
                w0: baseline,
                tags_before: self.baseline_tags.clone(),
                tags_seen: BTreeSet::new(),
                badge_seen: None,
                tags_latched: self.debouncer.present(),
                lost_frames: 0,
                level_g: baseline,
                steps: 0,
            });
        } else if tags_changed {
            if let TrackerMode::Pending(p) = &mut self.mode {
                p.tags_latched.extend(self.debouncer.present());
            }
        }

        let TrackerMode::Pending(pending) = &mut self.mode else {
            unreachable!("tracker is pending here");
        };
        pending.tags_seen.extend(frame.container_tags().cloned());
        pending.track_level(&self.window, cfg);
        if let Some(b) = badge {
            pending.badge_seen = Some(b.clone());
        }

        // A settled reading needs the tag set to have held as long as the
        // weight; a read dropout that latches absent right at the end of the
        // window would otherwise be taken for a removal.
        let tags_steady = self.tags_steady_frames >= cfg.window_frames as u64;
        // A small step can pass the range test while the load cell is still
        // creeping toward its final value; wait that out too.
        let settled = is_stable(&self.window, cfg) && tags_steady && !is_creeping(&self.window, cfg);
        let mut events = if settled {
            let settled = Settled {
                w1: stable_weight(&self.window, cfg),
                t_end_ms: frame.timestamp_ms,
                tags_after: self.debouncer.present(),
            };
            let events = classify(pending, &settled, registry, cfg);
            if !events.is_empty() {
                self.baseline_weight_g = Some(settled.w1);
                self.baseline_tags = settled.tags_after;
            }
            self.mode = TrackerMode::Idle;
            events
        } else if (frame.timestamp_ms - pending.started_at_ms) as f64 > cfg.pending_timeout_s * 1000.0 {
            let now = stable_weight(&self.window, cfg);
            let ev = OperationEvent {
                tray_id: self.tray_id.clone(),
                tray_event_seq: 0,
                kind: EventKind::Anomaly,
                tag_id: None,
                delta_g: now - pending.w0,
                candidates: Default::default(),
                user_badge: pending.badge_seen.clone(),
                t_start_ms: pending.started_at_ms,
                t_end_ms: frame.timestamp_ms,
                unregistered: false,
                anomaly: Some(AnomalyReason::PendingTimeout),
            };
            self.baseline_weight_g = Some(now);
            self.baseline_tags = self.debouncer.present();
            self.mode = TrackerMode::Idle;
            vec![ev]
        } else {
            Vec::new()
        };

        for ev in events.iter_mut() {
            self.events_emitted += 1;
            ev.tray_event_seq = self.events_emitted;
        }
        Ok(events)
    }
}
