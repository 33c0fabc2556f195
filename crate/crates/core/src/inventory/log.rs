use thiserror::Error;

use super::{Inventory, InventoryError, InventoryEvent};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("event log line {line} does not apply: {source}")]
    Apply {
        line: usize,
        #[source]
        source: InventoryError,
    },
}

/// One log line, without the trailing newline.
pub fn encode_event(ev: &InventoryEvent) -> String {
    serde_json::to_string(ev).expect("inventory events always serialize")
}

pub fn decode_event(line: &str) -> Result<InventoryEvent, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
}

/// Rebuilds an inventory from log lines. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn replay<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Inventory, LogError> {
    let mut inv = Inventory::new();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev = decode_event(line).map_err(|e| LogError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        inv.apply(&ev).map_err(|source| LogError::Apply { line: i + 1, source })?;
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::super::tests::{op, stocked};
    use super::super::{Attribution, ChemicalRecord};
    use super::*;
    use crate::engine::{CandidateRole, EventKind};
    use crate::telemetry::TagId;

    #[derive(Clone, Debug)]
    enum Step {
        Remove(usize, f64),
        Return(usize, f64),
        Adjust(usize, f64),
        Ambiguous(f64, bool),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0..3usize, -1.0..1.0f64).prop_map(|(i, e)| Step::Remove(i, e)),
            (0..3usize, -40.0..20.0f64).prop_map(|(i, d)| Step::Return(i, d)),
            (0..3usize, -15.0..5.0f64).prop_map(|(i, d)| Step::Adjust(i, d)),
            (-30.0..-1.0f64, any::<bool>()).prop_map(|(d, r)| Step::Ambiguous(d, r)),
        ]
    }

    const TAGS: [&str; 3] = ["A", "B", "C"];

    fn build(steps: &[Step]) -> (Inventory, Vec<String>) {
        let mut inv = Inventory::new();
        let mut log = Vec::new();
        log.push(encode_event(
            &inv.register_chemical(ChemicalRecord {
                chemical_id: "x".into(),
                name: "X".into(),
                hazard_class: String::new(),
                unit: "g".into(),
                reorder_lead_time_days: 2.0,
            })
            .unwrap(),
        ));
        for (i, t) in TAGS.iter().enumerate() {
            let ev = inv
                .register_container(TagId::container(t), "x", 50.0, 300.0 + i as f64, 0)
                .unwrap();
            log.push(encode_event(&ev));
        }
        for (n, s) in steps.iter().enumerate() {
            let seq = n as u64 + 1;
            let ev = match s {
                Step::Remove(i, e) => {
                    let g = inv.container(&TagId::container(TAGS[*i])).unwrap().gross_g;
                    op(EventKind::Remove, TAGS[*i], -(g + e), seq)
                }
                Step::Return(i, d) => {
                    let g = inv.container(&TagId::container(TAGS[*i])).unwrap().gross_g;
                    op(EventKind::Return, TAGS[*i], (g + d).max(51.0), seq)
                }
                Step::Adjust(i, d) => op(EventKind::Adjust, TAGS[*i], *d, seq),
                Step::Ambiguous(d, resolve) => {
                    let mut a = op(EventKind::Ambiguous, "A", *d, seq);
                    a.tag_id = None;
                    a.candidates = BTreeMap::from([
                        (TagId::container("A"), CandidateRole::Present),
                        (TagId::container("B"), CandidateRole::Present),
                    ]);
                    let (ev, out) = inv.apply_event(a).unwrap();
                    log.push(encode_event(&ev));
                    if *resolve {
                        let attribution = vec![
                            Attribution {
                                tag_id: TagId::container("A"),
                                delta_g: d / 2.0,
                            },
                            Attribution {
                                tag_id: TagId::container("B"),
                                delta_g: d - d / 2.0,
                            },
                        ];
                        let (ev, _) = inv
                            .resolve_ambiguous(out.parked.unwrap(), attribution, 0)
                            .unwrap();
                        log.push(encode_event(&ev));
                    }
                    continue;
                }
            };
            let (ev, _) = inv.apply_event(ev).unwrap();
            log.push(encode_event(&ev));
        }
        (inv, log)
    }

    proptest! {
        #[test]
        fn replay_reproduces_state(steps in prop::collection::vec(step(), 0..40)) {
            let (live, log) = build(&steps);
            let replayed = replay(log.iter().map(String::as_str)).unwrap();
            prop_assert_eq!(&replayed, &live);
            let again = replay(log.iter().map(String::as_str)).unwrap();
            prop_assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&live).unwrap());
        }

        #[test]
        fn ledger_conserves_net(steps in prop::collection::vec(step(), 0..40)) {
            let (inv, _) = build(&steps);
            for c in inv.containers() {
                let entries: Vec<f64> = inv
                    .ledger()
                    .iter()
                    .filter(|e| e.tag_id == c.tag_id)
                    .map(|e| e.amount_g)
                    .collect();
                let initial_net = c.initial_gross_g - c.tare_g;
                let consumed: f64 = entries.iter().sum();
                let tol = 0.01 * entries.len().max(1) as f64;
                prop_assert!((initial_net - consumed - c.net_g()).abs() <= tol,
                    "{}: {} - {} != {}", c.tag_id, initial_net, consumed, c.net_g());
            }
        }

        #[test]
        fn negative_amounts_are_refills(steps in prop::collection::vec(step(), 0..40)) {
            let (inv, _) = build(&steps);
            for e in inv.ledger() {
                prop_assert!(e.amount_g >= 0.0 || e.refill);
            }
        }

        #[test]
        fn negative_net_is_always_flagged(steps in prop::collection::vec(step(), 0..40)) {
            let (inv, _) = build(&steps);
            for c in inv.containers() {
                if c.net_g() < -super::super::GROSS_TOLERANCE_G {
                    let flagged = inv.flags().iter().any(|f| {
                        f.tag_id.as_ref() == Some(&c.tag_id)
                            && matches!(f.kind, super::super::FlagKind::NegativeNet { .. })
                    });
                    prop_assert!(flagged);
                }
            }
        }
    }

    #[test]
    fn round_trip_single_event() {
        let ev = InventoryEvent::Operation(op(EventKind::Remove, "A", -150.0, 1));
        assert_eq!(decode_event(&encode_event(&ev)).unwrap(), ev);
    }

    #[test]
    fn replay_reports_bad_lines() {
        let err = replay(["{\"type\":\"nope\"}"]).unwrap_err();
        assert!(matches!(err, LogError::Parse { line: 1, .. }));
        let mut inv = stocked();
        let dup = inv
            .register_container(TagId::container("B"), "ethanol", 1.0, 2.0, 0)
            .unwrap();
        let line = encode_event(&dup);
        let err = replay([line.as_str()]).unwrap_err();
        assert!(matches!(err, LogError::Apply { line: 1, .. }));
    }
}
