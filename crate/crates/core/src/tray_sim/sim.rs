use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActionKind, ScenarioScript, GHOST_PREFIX};
use crate::engine::EventKind;
use crate::telemetry::{Calibration, TagId, TelemetryFrame};

/// Shortest time a badge stays readable around an action.
const BADGE_MIN_VISIBLE_S: f64 = 0.5;
const GHOST_POOL: u32 = 1_000_000;

/// Expected engine outcome of one scripted action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub time_ms: i64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_id: Option<TagId>,
    pub delta_g: f64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub candidates: BTreeSet<TagId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_badge: Option<TagId>,
}

fn action_ms(script: &ScenarioScript, time_s: f64) -> i64 {
    script.start_ms + (time_s * 1000.0).round() as i64
}

/// Expected events, read directly off the action list. In-place dispensing
/// can only be attributed when the container is alone on the tray.
pub fn ground_truth(script: &ScenarioScript) -> Vec<TruthEvent> {
    let mut on_tray: BTreeMap<&TagId, f64> = BTreeMap::new();
    let mut truth = Vec::with_capacity(script.actions.len());
    for a in &script.actions {
        let mut ev = TruthEvent {
            time_ms: action_ms(script, a.time_s),
            kind: EventKind::Return,
            tag_id: Some(a.tag_id.clone()),
            delta_g: 0.0,
            candidates: BTreeSet::new(),
            user_badge: a.badge.clone(),
        };
        match a.kind {
            ActionKind::Place => {
                let g = a.gross_g.unwrap_or_default();
                on_tray.insert(&a.tag_id, g);
                ev.delta_g = g;
            }
            ActionKind::Remove => {
                ev.kind = EventKind::Remove;
                ev.delta_g = -on_tray.remove(&a.tag_id).unwrap_or_default();
            }
            ActionKind::DispenseInPlace => {
                let d = a.delta_g.unwrap_or_default();
                if let Some(g) = on_tray.get_mut(&a.tag_id) {
                    *g += d;
                }
                ev.delta_g = d;
                if on_tray.len() == 1 {
                    ev.kind = EventKind::Adjust;
                } else {
                    ev.kind = EventKind::Ambiguous;
                    ev.tag_id = None;
                    ev.candidates = on_tray.keys().map(|t| (*t).clone()).collect();
                }
            }
        }
        truth.push(ev);
    }
    truth
}

#[derive(Clone, Debug)]
struct Transient {
    t0: f64,
    from: f64,
    to: f64,
    tau: f64,
    end: f64,
}

impl Transient {
    fn at(&self, t: f64) -> f64 {
        if t >= self.end || self.tau <= 0.0 {
            self.to
        } else {
            self.to + (self.from - self.to) * (-(t - self.t0) / self.tau).exp()
        }
    }
}

/// Frame generator for one scenario. Deterministic in (script, seed).
pub struct Simulator {
    script: ScenarioScript,
    cal: Calibration,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    frame: u64,
    frames: u64,
    next_action: usize,
    on_tray: BTreeMap<TagId, f64>,
    transient: Option<Transient>,
    badges: Vec<(TagId, f64)>,
}

impl Simulator {
    pub fn new(script: ScenarioScript) -> Self {
        Self::with_calibration(script, Calibration::default())
    }

    pub fn with_calibration(script: ScenarioScript, cal: Calibration) -> Self {
        let sigma = script.noise.weight_sigma_g;
        Simulator {
            rng: ChaCha8Rng::seed_from_u64(script.seed),
            noise: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma validated")),
            frames: script.frame_count(),
            frame: 0,
            next_action: 0,
            on_tray: BTreeMap::new(),
            transient: None,
            badges: Vec::new(),
            cal,
            script,
        }
    }

    fn target_weight(&self) -> f64 {
        self.script.base_weight_g + self.on_tray.values().sum::<f64>()
    }

    fn apply_actions_until(&mut self, t: f64) {
        while let Some(a) = self.script.actions.get(self.next_action) {
            if a.time_s > t {
                break;
            }
            let shown = self
                .transient
                .as_ref()
                .map_or_else(|| self.target_weight(), |tr| tr.at(a.time_s));
            match a.kind {
                ActionKind::Place => {
                    self.on_tray.insert(a.tag_id.clone(), a.gross_g.unwrap_or_default());
                }
                ActionKind::Remove => {
                    self.on_tray.remove(&a.tag_id);
                }
                ActionKind::DispenseInPlace => {
                    if let Some(g) = self.on_tray.get_mut(&a.tag_id) {
                        *g += a.delta_g.unwrap_or_default();
                    }
                }
            }
            self.transient = Some(Transient {
                t0: a.time_s,
                from: shown,
                to: self.target_weight(),
                tau: a.settle_s / 3.0,
                end: a.time_s + a.settle_s,
            });
            if let Some(b) = &a.badge {
                let until = a.time_s + a.settle_s.max(BADGE_MIN_VISIBLE_S);
                self.badges.push((b.clone(), until));
            }
            self.next_action += 1;
        }
    }

    /// Produces the next frame, or `None` once the scenario duration is over.
    pub fn step(&mut self) -> Option<TelemetryFrame> {
        if self.frame >= self.frames {
            return None;
        }
        let t = self.frame as f64 / self.script.sample_rate_hz;
        self.apply_actions_until(t);

        let mut grams = match &self.transient {
            Some(tr) if t < tr.end => tr.at(t),
            _ => {
                self.transient = None;
                self.target_weight()
            }
        };
        if let Some(n) = &self.noise {
            grams += n.sample(&mut self.rng);
        }
        let (weight_raw, weight_g) = self
            .cal
            .quantize(grams)
            .expect("simulated weight within calibration span");

        let read_prob = self.script.noise.tag_read_prob;
        let mut tags: Vec<TagId> = Vec::with_capacity(self.on_tray.len() + 2);
        for tag in self.on_tray.keys() {
            if read_prob >= 1.0 || self.rng.random::<f64>() < read_prob {
                tags.push(tag.clone());
            }
        }
        self.badges.retain(|(_, until)| t <= *until);
        let mut badges: BTreeSet<&TagId> = BTreeSet::new();
        for (b, _) in &self.badges {
            if read_prob >= 1.0 || self.rng.random::<f64>() < read_prob {
                badges.insert(b);
            }
        }
        tags.extend(badges.into_iter().cloned());
        let spurious = self.script.noise.spurious_tag_prob;
        if spurious > 0.0 && self.rng.random::<f64>() < spurious {
            let n = self.rng.random_range(0..GHOST_POOL);
            tags.push(TagId::parse(format!("{GHOST_PREFIX}{n}")).expect("ghost tag"));
        }

        self.frame += 1;
        Some(TelemetryFrame {
            tray_id: self.script.tray_id.clone(),
            seq: self.frame,
            timestamp_ms: self.script.start_ms + (t * 1000.0).round() as i64,
            weight_raw,
            weight_g,
            tags,
        })
    }
}

impl Iterator for Simulator {
    type Item = TelemetryFrame;

    fn next(&mut self) -> Option<TelemetryFrame> {
        self.step()
    }
}

/// All frames of a scenario plus its ground-truth events.
pub fn run(script: &ScenarioScript) -> (Vec<TelemetryFrame>, Vec<TruthEvent>) {
    let truth = ground_truth(script);
    (Simulator::new(script.clone()).collect(), truth)
}
