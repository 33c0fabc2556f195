use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionKind, NoiseModel, ScenarioScript, ScriptAction, DEFAULT_START_MS, SCENARIO_SCHEMA};
use crate::telemetry::{TagId, TrayId};

const CHEMICALS: [&str; 8] = [
    "ethanol",
    "acetone",
    "methanol",
    "hexane",
    "toluene",
    "dmso",
    "chloroform",
    "ethyl-acetate",
];
const BADGES: [&str; 6] = ["alice", "bob", "chen", "dana", "eve", "farid"];
/// Minimum net content the generator keeps in every container.
const MIN_NET_G: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub trays: usize,
    /// Actions per tray, including the initial placements.
    pub actions_per_tray: usize,
    pub containers_per_tray: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub base_weight_g: f64,
    /// Quiet time between the end of one action's transient and the next.
    pub min_gap_s: f64,
    pub max_gap_s: f64,
    /// Quiet time before the first action so trackers can settle a baseline.
    pub lead_in_s: f64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            trays: 10,
            actions_per_tray: 100,
            containers_per_tray: 4,
            noise: NoiseModel::default(),
            seed: 1,
            sample_rate_hz: 10.0,
            base_weight_g: 500.0,
            min_gap_s: 8.0,
            max_gap_s: 14.0,
            lead_in_s: 30.0,
        }
    }
}

/// Container known to the workload before any frame is sent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedContainer {
    pub tag_id: TagId,
    pub chemical_id: String,
    pub tare_g: f64,
    pub gross_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub scripts: Vec<ScenarioScript>,
    pub containers: Vec<SeedContainer>,
    pub chemicals: Vec<String>,
}

struct Held {
    tag: TagId,
    gross: f64,
    since_s: f64,
}

/// Random multi-tray take/return/dispense workload. Containers may come
/// back to a different tray than the one they left. Every script validates.
pub fn generate_workload(p: &WorkloadParams) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut containers = Vec::new();
    let mut tare: BTreeMap<TagId, f64> = BTreeMap::new();
    let mut trays: Vec<(ScenarioScript, BTreeMap<TagId, f64>, f64)> = Vec::new();

    for t in 0..p.trays {
        let tray_id = TrayId::new(format!("T{}", t + 1)).expect("tray id");
        let mut script = ScenarioScript {
            schema: SCENARIO_SCHEMA,
            tray_id,
            base_weight_g: p.base_weight_g,
            sample_rate_hz: p.sample_rate_hz,
            duration_s: 0.0,
            seed: p.seed.wrapping_mul(1000).wrapping_add(t as u64),
            start_ms: DEFAULT_START_MS,
            noise: p.noise,
            actions: Vec::new(),
        };
        let mut clock = p.lead_in_s;
        let mut on_tray = BTreeMap::new();
        for c in 0..p.containers_per_tray.min(p.actions_per_tray) {
            let tag = TagId::container(&format!("T{}-{}", t + 1, c + 1));
            let tare_g = rng.random_range(40.0..120.0_f64).round();
            let gross_g = tare_g + (rng.random_range(50.0..400.0_f64) * 10.0).round() / 10.0;
            containers.push(SeedContainer {
                tag_id: tag.clone(),
                chemical_id: CHEMICALS[rng.random_range(0..CHEMICALS.len())].to_string(),
                tare_g,
                gross_g,
            });
            tare.insert(tag.clone(), tare_g);
            let settle_s = settle(&mut rng);
            script.actions.push(ScriptAction {
                time_s: clock,
                kind: ActionKind::Place,
                tag_id: tag.clone(),
                gross_g: Some(gross_g),
                delta_g: None,
                settle_s,
                badge: badge(&mut rng),
            });
            on_tray.insert(tag, gross_g);
            clock += settle_s + rng.random_range(p.min_gap_s..p.max_gap_s);
        }
        trays.push((script, on_tray, clock));
    }

    let mut held: Vec<Held> = Vec::new();
    loop {
        let open: Vec<usize> = (0..trays.len())
            .filter(|&i| trays[i].0.actions.len() < p.actions_per_tray)
            .collect();
        // Advance the tray that is furthest behind so cross-tray moves stay causal.
        let Some(&i) = open.iter().min_by(|&&a, &&b| trays[a].2.total_cmp(&trays[b].2)) else {
            break;
        };
        let (script, on_tray, clock) = &mut trays[i];
        let now = *clock;
        let settle_s = settle(&mut rng);
        let roll: f64 = rng.random();
        let ready: Vec<usize> = (0..held.len()).filter(|&h| held[h].since_s + 5.0 <= now).collect();

        let action = if !ready.is_empty() && (roll < 0.45 || on_tray.is_empty()) {
            let h = held.swap_remove(*ready.choose(&mut rng).expect("non-empty"));
            let floor = tare[&h.tag] + MIN_NET_G;
            let gross = if rng.random_bool(0.1) {
                h.gross + rng.random_range(20.0..80.0_f64).round()
            } else {
                let used = (rng.random_range(0.0..30.0_f64) * 10.0).round() / 10.0;
                (h.gross - used).max(floor.min(h.gross))
            };
            on_tray.insert(h.tag.clone(), gross);
            Some((ActionKind::Place, h.tag, Some(gross), None))
        } else if !on_tray.is_empty() && roll < 0.85 {
            let keys: Vec<&TagId> = on_tray.keys().collect();
            let tag = (*keys.choose(&mut rng).expect("non-empty")).clone();
            let gross = on_tray.remove(&tag).expect("on tray");
            held.push(Held {
                tag: tag.clone(),
                gross,
                since_s: now,
            });
            Some((ActionKind::Remove, tag, None, None))
        } else if !on_tray.is_empty() {
            let keys: Vec<&TagId> = on_tray.keys().collect();
            let tag = (*keys.choose(&mut rng).expect("non-empty")).clone();
            let g = on_tray[&tag];
            let room = g - tare[&tag] - MIN_NET_G;
            if room > 3.0 {
                let d = -(rng.random_range(2.0..room.min(25.0)) * 10.0).round() / 10.0;
                on_tray.insert(tag.clone(), g + d);
                Some((ActionKind::DispenseInPlace, tag, None, Some(d)))
            } else {
                None
            }
        } else {
            None
        };

        match action {
            Some((kind, tag_id, gross_g, delta_g)) => {
                script.actions.push(ScriptAction {
                    time_s: now,
                    kind,
                    tag_id,
                    gross_g,
                    delta_g,
                    settle_s,
                    badge: badge(&mut rng),
                });
                *clock = now + settle_s + rng.random_range(p.min_gap_s..p.max_gap_s);
            }
            None => *clock = now + 1.0,
        }
    }

    let scripts = trays
        .into_iter()
        .map(|(mut s, _, clock)| {
            s.duration_s = (clock + 10.0).ceil();
            debug_assert!(s.validate().is_ok());
            s
        })
        .collect();
    let mut chemicals: Vec<String> = containers.iter().map(|c| c.chemical_id.clone()).collect();
    chemicals.sort();
    chemicals.dedup();
    Workload {
        scripts,
        containers,
        chemicals,
    }
}

fn settle(rng: &mut ChaCha8Rng) -> f64 {
    (rng.random_range(0.3..2.0_f64) * 10.0).round() / 10.0
}

fn badge(rng: &mut ChaCha8Rng) -> Option<TagId> {
    rng.random_bool(0.7)
        .then(|| TagId::badge(BADGES[rng.random_range(0..BADGES.len())]))
}
