//! Event-sourced chemical inventory.
//!
//! All state changes go through [`Inventory::apply`] with an
//! [`InventoryEvent`]; the append-only log of those events is the source of
//! truth and replaying it into an empty inventory reproduces the state. A
//! command that fails validation leaves the state untouched and must not be
//! logged.

mod log;
mod queries;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CandidateRole, EventKind, GrossLookup, OperationEvent};
use crate::telemetry::{TagId, TrayId};

pub use log::{decode_event, encode_event, replay, LogError};
pub use queries::{
    utc_day, ChemicalSummary, ContainerQuantity, DailyTotal, History, Remaining,
};

/// Slack on gross/net plausibility checks, grams.
pub const GROSS_TOLERANCE_G: f64 = 0.5;
/// Largest accepted gap between an ambiguous delta and its manual split.
pub const RESOLUTION_TOLERANCE_G: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InventoryError {
    #[error("tag {tag} already registered for {chemical_id} (tare {tare_g} g, gross {gross_g} g)")]
    DuplicateTag {
        tag: TagId,
        chemical_id: String,
        tare_g: f64,
        gross_g: f64,
    },
    #[error("tare {tare_g} g must be below gross {gross_g} g")]
    TareNotBelowGross { tare_g: f64, gross_g: f64 },
    #[error("chemical {0} already registered")]
    DuplicateChemical(String),
    #[error("chemical name must be non-empty")]
    EmptyName,
    #[error("unknown chemical {0}")]
    UnknownChemical(String),
    #[error("unknown container {0}")]
    UnknownContainer(TagId),
    #[error("unknown ambiguous event {0}")]
    UnknownParkedEvent(u64),
    #[error("ambiguous event {0} was already resolved")]
    AlreadyResolved(u64),
    #[error("attribution sums to {got} g but the event delta is {expected} g")]
    SumMismatch { expected: f64, got: f64 },
    #[error("tag {0} is not a candidate of the ambiguous event")]
    NotACandidate(TagId),
    #[error("delta {delta_g} g for {tag} contradicts its role ({role:?})")]
    RoleSign {
        tag: TagId,
        role: CandidateRole,
        delta_g: f64,
    },
    #[error("time range is reversed: {from_ms} > {to_ms}")]
    ReversedRange { from_ms: i64, to_ms: i64 },
    #[error("invalid value for {field}: {value}")]
    InvalidValue { field: &'static str, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChemicalRecord {
    pub chemical_id: String,
    pub name: String,
    #[serde(default)]
    pub hazard_class: String,
    #[serde(default = "grams")]
    pub unit: String,
    #[serde(default)]
    pub reorder_lead_time_days: f64,
}

fn grams() -> String {
    "g".to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// Registered but not yet seen on any tray.
    Unplaced,
    Tray(TrayId),
    CheckedOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkout {
    /// Ledger gross when the container left; consumption is measured from it.
    pub gross_at_checkout: f64,
    /// Gross implied by the removal's weight delta.
    pub measured_gross_g: f64,
    pub user_badge: Option<TagId>,
    pub t_out_ms: i64,
    pub from_tray: TrayId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerRecord {
    pub tag_id: TagId,
    pub chemical_id: String,
    pub tare_g: f64,
    pub gross_g: f64,
    pub initial_gross_g: f64,
    pub location: Location,
    pub checkout: Option<Checkout>,
    pub registered_at_ms: i64,
}

impl ContainerRecord {
    pub fn net_g(&self) -> f64 {
        self.gross_g - self.tare_g
    }

    pub fn is_checked_out(&self) -> bool {
        self.checkout.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySource {
    /// Closed Remove/Return pair.
    Checkout,
    /// In-place change while on a tray.
    Adjust,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionEntry {
    pub chemical_id: String,
    pub tag_id: TagId,
    /// Grams used; negative only for refills.
    pub amount_g: f64,
    pub user_badge: Option<TagId>,
    pub t_out_ms: i64,
    pub t_in_ms: i64,
    pub refill: bool,
    pub source: EntrySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum FlagKind {
    /// Removal weight disagrees with the ledger gross.
    CheckoutMismatch { stored_g: f64, measured_g: f64 },
    /// Container came back with no open checkout and a different weight.
    ReturnMismatch { stored_g: f64, measured_g: f64 },
    /// Remove for a container already checked out.
    DoubleCheckout,
    /// Adjust reported for a container the ledger has as checked out.
    AdjustWhileCheckedOut,
    NegativeNet { net_g: f64 },
    /// Engine emitted an Anomaly event.
    EngineAnomaly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub kind: FlagKind,
    pub tag_id: Option<TagId>,
    pub tray_id: Option<TrayId>,
    pub at_ms: i64,
    pub event: Option<OperationEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParkedEvent {
    pub id: u64,
    pub event: OperationEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub tag_id: TagId,
    pub delta_g: f64,
}

/// One line of the inventory event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InventoryEvent {
    ChemicalRegistered(ChemicalRecord),
    ContainerRegistered {
        tag_id: TagId,
        chemical_id: String,
        tare_g: f64,
        gross_g: f64,
        at_ms: i64,
    },
    Operation(OperationEvent),
    Resolved {
        parked_id: u64,
        attribution: Vec<Attribution>,
        at_ms: i64,
    },
}

impl InventoryEvent {
    /// Time the event refers to, used for audit timestamps.
    pub fn at_ms(&self) -> i64 {
        match self {
            InventoryEvent::ChemicalRegistered(_) => 0,
            InventoryEvent::ContainerRegistered { at_ms, .. } => *at_ms,
            InventoryEvent::Operation(op) => op.t_end_ms,
            InventoryEvent::Resolved { at_ms, .. } => *at_ms,
        }
    }
}

/// What applying one event did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub consumption: Vec<ConsumptionEntry>,
    pub parked: Option<u64>,
    pub quarantined: bool,
    pub flags: Vec<FlagKind>,
    /// Operation already applied (same tray and per-tray event number).
    pub duplicate: bool,
    /// Operations produced by a resolution.
    pub resolved_ops: Vec<OperationEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    chemicals: BTreeMap<String, ChemicalRecord>,
    containers: BTreeMap<TagId, ContainerRecord>,
    ledger: Vec<ConsumptionEntry>,
    ambiguous: BTreeMap<u64, ParkedEvent>,
    resolved: BTreeSet<u64>,
    next_parked_id: u64,
    quarantine: Vec<OperationEvent>,
    flags: Vec<Flag>,
    last_tray_event: BTreeMap<TrayId, u64>,
    events_applied: u64,
}

impl GrossLookup for Inventory {
    fn last_known_gross(&self, tag: &TagId) -> Option<f64> {
        self.containers.get(tag).map(|c| c.gross_g)
    }
}

impl Inventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn chemical(&self, id: &str) -> Option<&ChemicalRecord> {
        self.chemicals.get(id)
    }

    pub fn chemicals(&self) -> impl Iterator<Item = &ChemicalRecord> {
        self.chemicals.values()
    }

    pub fn container(&self, tag: &TagId) -> Option<&ContainerRecord> {
        self.containers.get(tag)
    }

    pub fn containers(&self) -> impl Iterator<Item = &ContainerRecord> {
        self.containers.values()
    }

    pub fn ledger(&self) -> &[ConsumptionEntry] {
        &self.ledger
    }

    pub fn ambiguous(&self) -> impl Iterator<Item = &ParkedEvent> {
        self.ambiguous.values()
    }

    pub fn quarantine(&self) -> &[OperationEvent] {
        &self.quarantine
    }

    pub fn flags(&self) -> &[Flag] {
        &self.flags
    }

    pub fn events_applied(&self) -> u64 {
        self.events_applied
    }

    /// Highest per-tray event number applied for `tray`.
    pub fn last_tray_event(&self, tray: &TrayId) -> u64 {
        self.last_tray_event.get(tray).copied().unwrap_or(0)
    }

    pub fn register_chemical(&mut self, rec: ChemicalRecord) -> Result<InventoryEvent, InventoryError> {
        let ev = InventoryEvent::ChemicalRegistered(rec);
        self.apply(&ev)?;
        Ok(ev)
    }

    pub fn register_container(
        &mut self,
        tag_id: TagId,
        chemical_id: &str,
        tare_g: f64,
        gross_g: f64,
        at_ms: i64,
    ) -> Result<InventoryEvent, InventoryError> {
        let ev = InventoryEvent::ContainerRegistered {
            tag_id,
            chemical_id: chemical_id.to_string(),
            tare_g,
            gross_g,
            at_ms,
        };
        self.apply(&ev)?;
        Ok(ev)
    }

    pub fn apply_event(&mut self, op: OperationEvent) -> Result<(InventoryEvent, Outcome), InventoryError> {
        let ev = InventoryEvent::Operation(op);
        let out = self.apply(&ev)?;
        Ok((ev, out))
    }

    pub fn resolve_ambiguous(
        &mut self,
        parked_id: u64,
        attribution: Vec<Attribution>,
        at_ms: i64,
    ) -> Result<(InventoryEvent, Outcome), InventoryError> {
        let ev = InventoryEvent::Resolved {
            parked_id,
            attribution,
            at_ms,
        };
        let out = self.apply(&ev)?;
        Ok((ev, out))
    }

    /// Validates and applies one event. On error nothing changes.
    pub fn apply(&mut self, ev: &InventoryEvent) -> Result<Outcome, InventoryError> {
        let out = match ev {
            InventoryEvent::ChemicalRegistered(rec) => {
                if rec.name.trim().is_empty() {
                    return Err(InventoryError::EmptyName);
                }
                if self.chemicals.contains_key(&rec.chemical_id) {
                    return Err(InventoryError::DuplicateChemical(rec.chemical_id.clone()));
                }
                if !(rec.reorder_lead_time_days.is_finite() && rec.reorder_lead_time_days >= 0.0) {
                    return Err(InventoryError::InvalidValue {
                        field: "reorder_lead_time_days",
                        value: rec.reorder_lead_time_days,
                    });
                }
                self.chemicals.insert(rec.chemical_id.clone(), rec.clone());
                Outcome::default()
            }
            InventoryEvent::ContainerRegistered {
                tag_id,
                chemical_id,
                tare_g,
                gross_g,
                at_ms,
            } => {
                if let Some(c) = self.containers.get(tag_id) {
                    return Err(InventoryError::DuplicateTag {
                        tag: tag_id.clone(),
                        chemical_id: c.chemical_id.clone(),
                        tare_g: c.tare_g,
                        gross_g: c.gross_g,
                    });
                }
                if !self.chemicals.contains_key(chemical_id) {
                    return Err(InventoryError::UnknownChemical(chemical_id.clone()));
                }
                if !tag_id.is_container() {
                    return Err(InventoryError::UnknownContainer(tag_id.clone()));
                }
                if !(tare_g.is_finite() && gross_g.is_finite() && *tare_g >= 0.0) {
                    return Err(InventoryError::InvalidValue {
                        field: "tare_g",
                        value: *tare_g,
                    });
                }
                if tare_g >= gross_g {
                    return Err(InventoryError::TareNotBelowGross {
                        tare_g: *tare_g,
                        gross_g: *gross_g,
                    });
                }
                self.containers.insert(
                    tag_id.clone(),
                    ContainerRecord {
                        tag_id: tag_id.clone(),
                        chemical_id: chemical_id.clone(),
                        tare_g: *tare_g,
                        gross_g: *gross_g,
                        initial_gross_g: *gross_g,
                        location: Location::Unplaced,
                        checkout: None,
                        registered_at_ms: *at_ms,
                    },
                );
                Outcome::default()
            }
            InventoryEvent::Operation(op) => {
                let last = self.last_tray_event(&op.tray_id);
                if op.tray_event_seq != 0 && op.tray_event_seq <= last {
                    return Ok(Outcome {
                        duplicate: true,
                        ..Outcome::default()
                    });
                }
                let out = self.apply_operation(op);
                if op.tray_event_seq != 0 {
                    self.last_tray_event.insert(op.tray_id.clone(), op.tray_event_seq);
                }
                out
            }
            InventoryEvent::Resolved {
                parked_id,
                attribution,
                at_ms,
            } => self.apply_resolution(*parked_id, attribution, *at_ms)?,
        };
        self.events_applied += 1;
        Ok(out)
    }

    fn flag(&mut self, kind: FlagKind, op: &OperationEvent) {
        self.flags.push(Flag {
            kind,
            tag_id: op.tag_id.clone(),
            tray_id: Some(op.tray_id.clone()),
            at_ms: op.t_end_ms,
            event: Some(op.clone()),
        });
    }

    fn apply_operation(&mut self, op: &OperationEvent) -> Outcome {
        let mut out = Outcome::default();
        match op.kind {
            EventKind::Ambiguous => {
                let id = self.next_parked_id;
                self.next_parked_id += 1;
                self.ambiguous.insert(id, ParkedEvent { id, event: op.clone() });
                out.parked = Some(id);
                return out;
            }
            EventKind::Anomaly => {
                self.flag(FlagKind::EngineAnomaly, op);
                out.flags.push(FlagKind::EngineAnomaly);
                return out;
            }
            _ => {}
        }
        let Some(tag) = op.tag_id.as_ref().filter(|t| self.containers.contains_key(*t)) else {
            self.quarantine.push(op.clone());
            out.quarantined = true;
            return out;
        };
        let tag = tag.clone();
        let mut flags = Vec::new();
        let mut entry = None;
        {
            let c = self.containers.get_mut(&tag).expect("checked above");
            match op.kind {
                EventKind::Remove => {
                    let measured = -op.delta_g;
                    if c.checkout.is_some() {
                        flags.push(FlagKind::DoubleCheckout);
                    } else {
                        if (measured - c.gross_g).abs() > GROSS_TOLERANCE_G {
                            flags.push(FlagKind::CheckoutMismatch {
                                stored_g: c.gross_g,
                                measured_g: measured,
                            });
                        }
                        c.checkout = Some(Checkout {
                            gross_at_checkout: c.gross_g,
                            measured_gross_g: measured,
                            user_badge: op.user_badge.clone(),
                            t_out_ms: op.t_end_ms,
                            from_tray: op.tray_id.clone(),
                        });
                        c.location = Location::CheckedOut;
                    }
                }
                EventKind::Return => {
                    let measured = op.delta_g;
                    match c.checkout.take() {
                        Some(co) => {
                            let amount = co.gross_at_checkout - measured;
                            entry = Some(ConsumptionEntry {
                                chemical_id: c.chemical_id.clone(),
                                tag_id: tag.clone(),
                                amount_g: amount,
                                user_badge: op.user_badge.clone().or(co.user_badge),
                                t_out_ms: co.t_out_ms,
                                t_in_ms: op.t_end_ms,
                                refill: amount < 0.0,
                                source: EntrySource::Checkout,
                            });
                            c.gross_g = measured;
                        }
                        None if (measured - c.gross_g).abs() > GROSS_TOLERANCE_G => {
                            flags.push(FlagKind::ReturnMismatch {
                                stored_g: c.gross_g,
                                measured_g: measured,
                            });
                        }
                        None => {}
                    }
                    c.location = Location::Tray(op.tray_id.clone());
                }
                EventKind::Adjust => {
                    if let Some(co) = c.checkout.as_mut() {
                        co.gross_at_checkout += op.delta_g;
                        flags.push(FlagKind::AdjustWhileCheckedOut);
                    }
                    c.gross_g += op.delta_g;
                    entry = Some(ConsumptionEntry {
                        chemical_id: c.chemical_id.clone(),
                        tag_id: tag.clone(),
                        amount_g: -op.delta_g,
                        user_badge: op.user_badge.clone(),
                        t_out_ms: op.t_start_ms,
                        t_in_ms: op.t_end_ms,
                        refill: op.delta_g > 0.0,
                        source: EntrySource::Adjust,
                    });
                }
                EventKind::Ambiguous | EventKind::Anomaly => unreachable!("handled above"),
            }
            if c.net_g() < -GROSS_TOLERANCE_G {
                flags.push(FlagKind::NegativeNet { net_g: c.net_g() });
            }
        }
        for f in &flags {
            self.flag(f.clone(), op);
        }
        out.flags = flags;
        if let Some(e) = entry {
            self.ledger.push(e.clone());
            out.consumption.push(e);
        }
        out
    }

    fn apply_resolution(
        &mut self,
        parked_id: u64,
        attribution: &[Attribution],
        at_ms: i64,
    ) -> Result<Outcome, InventoryError> {
        let Some(parked) = self.ambiguous.get(&parked_id) else {
            return Err(if self.resolved.contains(&parked_id) {
                InventoryError::AlreadyResolved(parked_id)
            } else {
                InventoryError::UnknownParkedEvent(parked_id)
            });
        };
        let ev = &parked.event;
        let sum: f64 = attribution.iter().map(|a| a.delta_g).sum();
        if !((sum - ev.delta_g).abs() <= RESOLUTION_TOLERANCE_G + 1e-9) {
            return Err(InventoryError::SumMismatch {
                expected: ev.delta_g,
                got: sum,
            });
        }
        let mut ops = Vec::new();
        for a in attribution {
            let role = *ev
                .candidates
                .get(&a.tag_id)
                .ok_or_else(|| InventoryError::NotACandidate(a.tag_id.clone()))?;
            if !self.containers.contains_key(&a.tag_id) {
                return Err(InventoryError::UnknownContainer(a.tag_id.clone()));
            }
            let kind = match role {
                CandidateRole::Removed if a.delta_g <= 0.0 => EventKind::Remove,
                CandidateRole::Returned if a.delta_g >= 0.0 => EventKind::Return,
                CandidateRole::Present => EventKind::Adjust,
                _ => {
                    return Err(InventoryError::RoleSign {
                        tag: a.tag_id.clone(),
                        role,
                        delta_g: a.delta_g,
                    })
                }
            };
            if kind == EventKind::Adjust && a.delta_g == 0.0 {
                continue;
            }
            ops.push(OperationEvent {
                kind,
                tag_id: Some(a.tag_id.clone()),
                delta_g: a.delta_g,
                candidates: BTreeMap::new(),
                unregistered: false,
                anomaly: None,
                ..ev.clone()
            });
        }
        let _ = at_ms;
        self.ambiguous.remove(&parked_id);
        self.resolved.insert(parked_id);
        let mut out = Outcome::default();
        for op in ops {
            let o = self.apply_operation(&op);
            out.consumption.extend(o.consumption);
            out.flags.extend(o.flags);
            out.resolved_ops.push(op);
        }
        Ok(out)
    }
}
