use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::config::{ServiceConfig, API_SCHEMA, SNAPSHOT_SCHEMA};
use super::ServiceError;
use crate::audit::{canonicalize, AuditChain, AuditEntry};
use crate::engine::{OperationEvent, TrayTracker};
use crate::forecast::{daily_consumption, estimate_from_daily, restock_alerts, RateEstimate, RestockAlert};
use crate::inventory::{utc_day, Attribution, ChemicalRecord, Inventory, InventoryEvent, Outcome};
use crate::telemetry::{decode_frame, TagId, TelemetryFrame, TrayId, CALIBRATION_MISMATCH_G};

/// Gap sequence numbers remembered per tray for telling late frames from
/// duplicates. Older gaps are forgotten first.
const MAX_TRACKED_GAPS: usize = 65_536;

/// One audit-chained record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum AuditRecord {
    InventoryEvent { log_index: u64, event: InventoryEvent },
    Note { note: serde_json::Value },
}

/// Something the pipeline has committed in memory and the store must write.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Event { line: String, audit: AuditEntry },
    Audit(AuditEntry),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeqState {
    pub high: Option<u64>,
    pub missing: BTreeSet<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrayStats {
    pub frames_accepted: u64,
    pub duplicates: u64,
    pub rejected: u64,
    /// Frames whose reported grams disagreed with the configured calibration.
    pub calibration_mismatches: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    UnknownTray,
    OutOfOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number in the request body.
    pub line: usize,
    pub reason: RejectReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tray_id: Option<TrayId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub schema: u32,
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: Vec<Rejection>,
    pub events: Vec<OperationEvent>,
}

/// Cached runtime state that is not derivable from the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema: u32,
    pub log_len: u64,
    pub audit_len: u64,
    pub audit_head: String,
    pub trackers: BTreeMap<TrayId, TrayTracker>,
    pub seq: BTreeMap<TrayId, SeqState>,
    pub stats: BTreeMap<TrayId, TrayStats>,
    pub inventory: Inventory,
}

/// Ingestion, event application and audit chaining, without any I/O.
pub struct Pipeline {
    config: ServiceConfig,
    trackers: BTreeMap<TrayId, TrayTracker>,
    seq: BTreeMap<TrayId, SeqState>,
    stats: BTreeMap<TrayId, TrayStats>,
    inventory: Inventory,
    log_len: u64,
    chain: AuditChain,
    tray_events: BTreeMap<TrayId, Vec<OperationEvent>>,
    uncommitted: Vec<Record>,
}

impl Pipeline {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let trackers = config
            .trays
            .keys()
            .map(|t| (t.clone(), TrayTracker::new(t.clone())))
            .collect();
        Ok(Pipeline {
            config,
            trackers,
            seq: BTreeMap::new(),
            stats: BTreeMap::new(),
            inventory: Inventory::new(),
            log_len: 0,
            chain: AuditChain::new(),
            tray_events: BTreeMap::new(),
            uncommitted: Vec::new(),
        })
    }

    /// Rebuilds state from a recovered event log and audit chain. Audit
    /// entries missing for logged events are re-created and queued for
    /// writing. Tracker state comes from `snapshot` unless the snapshot is
    /// ahead of the log.
    pub fn restore(
        config: ServiceConfig,
        events: Vec<InventoryEvent>,
        audit: Vec<AuditEntry>,
        snapshot: Option<Snapshot>,
    ) -> Result<Self, ServiceError> {
        let mut p = Pipeline::new(config)?;
        for (i, ev) in events.iter().enumerate() {
            let out = p
                .inventory
                .apply(ev)
                .map_err(|e| ServiceError::Recovery(format!("event log line {}: {e}", i + 1)))?;
            p.note_applied(ev, &out);
            p.log_len += 1;
        }
        p.chain = AuditChain::from_entries(audit)
            .map_err(|b| ServiceError::Recovery(format!("audit chain fails at entry {}", b.index)))?;
        let chained = chained_events(p.chain.entries())?;
        for (i, ev) in events.iter().enumerate().skip(chained as usize) {
            let entry = p.chain_event(i as u64, ev)?;
            p.uncommitted.push(Record::Audit(entry));
        }
        match snapshot {
            Some(s) if s.schema == SNAPSHOT_SCHEMA && s.log_len <= p.log_len => {
                for (tray, tracker) in s.trackers {
                    if p.trackers.contains_key(&tray) {
                        p.trackers.insert(tray, tracker);
                    }
                }
                p.seq = s.seq;
                p.stats = s.stats;
            }
            _ => {
                for (tray, t) in p.trackers.iter_mut() {
                    t.resume_numbering(p.inventory.last_tray_event(tray));
                }
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn chain(&self) -> &AuditChain {
        &self.chain
    }

    pub fn log_len(&self) -> u64 {
        self.log_len
    }

    pub fn tracker(&self, tray: &TrayId) -> Option<&TrayTracker> {
        self.trackers.get(tray)
    }

    pub fn stats(&self, tray: &TrayId) -> Option<&TrayStats> {
        self.stats.get(tray)
    }

    /// Operations applied for `tray`, oldest first. None for unknown trays.
    pub fn tray_events(&self, tray: &TrayId) -> Option<&[OperationEvent]> {
        if !self.trackers.contains_key(tray) {
            return None;
        }
        Some(self.tray_events.get(tray).map(Vec::as_slice).unwrap_or(&[]))
    }

    /// Records committed since the last call, in commit order.
    pub fn take_uncommitted(&mut self) -> Vec<Record> {
        std::mem::take(&mut self.uncommitted)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            schema: SNAPSHOT_SCHEMA,
            log_len: self.log_len,
            audit_len: self.chain.len(),
            audit_head: hex::encode(self.chain.head()),
            trackers: self.trackers.clone(),
            seq: self.seq.clone(),
            stats: self.stats.clone(),
            inventory: self.inventory.clone(),
        }
    }

    fn note_applied(&mut self, ev: &InventoryEvent, out: &Outcome) {
        match ev {
            InventoryEvent::Operation(op) if !out.duplicate => {
                self.tray_events.entry(op.tray_id.clone()).or_default().push(op.clone());
            }
            InventoryEvent::Resolved { .. } => {
                for op in &out.resolved_ops {
                    self.tray_events.entry(op.tray_id.clone()).or_default().push(op.clone());
                }
            }
            _ => {}
        }
    }

    fn chain_event(&mut self, log_index: u64, ev: &InventoryEvent) -> Result<AuditEntry, ServiceError> {
        let payload = canonicalize(&AuditRecord::InventoryEvent {
            log_index,
            event: ev.clone(),
        })?;
        Ok(self.chain.append_canonical(payload, ev.at_ms()).clone())
    }

    /// Applies a validated command event and queues its log line and audit
    /// entry.
    fn commit(&mut self, ev: InventoryEvent) -> Result<Outcome, ServiceError> {
        let out = self.inventory.apply(&ev)?;
        if out.duplicate {
            return Ok(out);
        }
        self.note_applied(&ev, &out);
        let audit = self.chain_event(self.log_len, &ev)?;
        self.log_len += 1;
        self.uncommitted.push(Record::Event {
            line: crate::inventory::encode_event(&ev),
            audit,
        });
        Ok(out)
    }

    /// Registers every configured chemical and container not yet known.
    pub fn seed_from_config(&mut self) -> Result<(), ServiceError> {
        for ch in self.config.chemicals.clone() {
            if self.inventory.chemical(&ch.chemical_id).is_none() {
                self.commit(InventoryEvent::ChemicalRegistered(ch))?;
            }
        }
        for c in self.config.containers.clone() {
            if self.inventory.container(&c.tag_id).is_none() {
                self.commit(InventoryEvent::ContainerRegistered {
                    tag_id: c.tag_id,
                    chemical_id: c.chemical_id,
                    tare_g: c.tare_g,
                    gross_g: c.gross_g,
                    at_ms: 0,
                })?;
            }
        }
        Ok(())
    }

    pub fn register_chemical(&mut self, rec: ChemicalRecord) -> Result<(), ServiceError> {
        self.commit(InventoryEvent::ChemicalRegistered(rec)).map(|_| ())
    }

    pub fn register_container(
        &mut self,
        tag_id: TagId,
        chemical_id: &str,
        tare_g: f64,
        gross_g: f64,
        at_ms: i64,
    ) -> Result<(), ServiceError> {
        self.commit(InventoryEvent::ContainerRegistered {
            tag_id,
            chemical_id: chemical_id.to_string(),
            tare_g,
            gross_g,
            at_ms,
        })
        .map(|_| ())
    }

    /// Applies a manual split of a parked Ambiguous event; returns the
    /// operations it produced.
    pub fn resolve(
        &mut self,
        parked_id: u64,
        attribution: Vec<Attribution>,
        at_ms: i64,
    ) -> Result<Vec<OperationEvent>, ServiceError> {
        let out = self.commit(InventoryEvent::Resolved {
            parked_id,
            attribution,
            at_ms,
        })?;
        Ok(out.resolved_ops)
    }

    /// Chains a free-form note (lab record, experiment result).
    pub fn note(&mut self, note: serde_json::Value, at_ms: i64) -> Result<AuditEntry, ServiceError> {
        let payload = canonicalize(&AuditRecord::Note { note })?;
        let entry = self.chain.append_canonical(payload, at_ms).clone();
        self.uncommitted.push(Record::Audit(entry.clone()));
        Ok(entry)
    }

    /// Processes a newline-delimited batch of frame lines.
    pub fn ingest(&mut self, body: &[u8]) -> Result<IngestReport, ServiceError> {
        let mut report = IngestReport {
            schema: API_SCHEMA,
            ..IngestReport::default()
        };
        let mut by_tray: BTreeMap<TrayId, Vec<(usize, TelemetryFrame)>> = BTreeMap::new();
        for (i, line) in body.split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match decode_frame(line) {
                Err(e) => report.rejected.push(Rejection {
                    line: i + 1,
                    reason: RejectReason::Malformed,
                    tray_id: None,
                    field: e.field.map(str::to_string),
                    offset: Some(e.offset),
                    message: e.to_string(),
                }),
                Ok(f) if !self.config.trays.contains_key(&f.tray_id) => report.rejected.push(Rejection {
                    line: i + 1,
                    reason: RejectReason::UnknownTray,
                    message: format!("unknown tray {}", f.tray_id),
                    tray_id: Some(f.tray_id),
                    field: None,
                    offset: None,
                }),
                Ok(f) => by_tray.entry(f.tray_id.clone()).or_default().push((i + 1, f)),
            }
        }

        let mut queues: Vec<Vec<TelemetryFrame>> = Vec::with_capacity(by_tray.len());
        for (tray, mut frames) in by_tray {
            frames.sort_by_key(|(_, f)| f.seq);
            let cal = self.config.trays[&tray];
            let state = self.seq.entry(tray.clone()).or_default();
            let stats = self.stats.entry(tray.clone()).or_default();
            let mut accepted = Vec::with_capacity(frames.len());
            for (line, mut f) in frames {
                if let Some(high) = state.high.filter(|&h| f.seq <= h) {
                    if state.missing.contains(&f.seq) {
                        stats.rejected += 1;
                        report.rejected.push(Rejection {
                            line,
                            reason: RejectReason::OutOfOrder,
                            message: format!(
                                "seq {} of tray {} arrived after seq {high}; frames must not be reordered across batches",
                                f.seq, tray
                            ),
                            tray_id: Some(tray.clone()),
                            field: Some("seq".to_string()),
                            offset: None,
                        });
                    } else {
                        stats.duplicates += 1;
                        report.duplicates += 1;
                    }
                    continue;
                }
                if let Some(high) = state.high {
                    let first = high + 1;
                    let span = f.seq - first;
                    let keep = span.min(MAX_TRACKED_GAPS as u64);
                    state.missing.extend(f.seq - keep..f.seq);
                    while state.missing.len() > MAX_TRACKED_GAPS {
                        state.missing.pop_first();
                    }
                }
                state.high = Some(f.seq);
                let grams = cal.to_grams(f.weight_raw as i64).map_err(|e| {
                    ServiceError::Recovery(format!("calibration failed for in-range raw value: {e}"))
                })?;
                if (grams - f.weight_g).abs() > CALIBRATION_MISMATCH_G {
                    stats.calibration_mismatches += 1;
                }
                f.weight_g = grams;
                stats.frames_accepted += 1;
                accepted.push(f);
            }
            report.accepted += accepted.len();
            queues.push(accepted);
        }

        // Interleave trays by timestamp so cross-tray moves reach the
        // inventory in the order they happened; each tray stays in seq order.
        let mut heads: BinaryHeap<Reverse<(i64, usize, usize)>> = queues
            .iter()
            .enumerate()
            .filter(|(_, q)| !q.is_empty())
            .map(|(qi, q)| Reverse((q[0].timestamp_ms, qi, 0)))
            .collect();
        while let Some(Reverse((_, qi, fi))) = heads.pop() {
            let frame = &queues[qi][fi];
            if let Some(next) = queues[qi].get(fi + 1) {
                heads.push(Reverse((next.timestamp_ms, qi, fi + 1)));
            }
            let tracker = self.trackers.get_mut(&frame.tray_id).expect("tray is configured");
            let events = tracker.observe_frame(frame, &self.config.stability, &self.inventory)?;
            for ev in events {
                let out = self.commit(InventoryEvent::Operation(ev.clone()))?;
                if !out.duplicate {
                    report.events.push(ev);
                }
            }
        }
        Ok(report)
    }

    /// Per-chemical daily-rate estimates through the UTC day of `now_ms`.
    pub fn estimates(&self, now_ms: i64) -> Result<BTreeMap<String, RateEstimate>, ServiceError> {
        let today = utc_day(now_ms);
        let mut out = BTreeMap::new();
        for ch in self.inventory.chemicals() {
            let entries = self
                .inventory
                .ledger()
                .iter()
                .filter(|e| e.chemical_id == ch.chemical_id && utc_day(e.t_in_ms) <= today);
            let daily = daily_consumption(entries);
            let est = estimate_from_daily(&ch.chemical_id, &daily, today, self.config.forecast_alpha)?;
            out.insert(ch.chemical_id.clone(), est);
        }
        Ok(out)
    }

    pub fn alerts(&self, now_ms: i64) -> Result<Vec<RestockAlert>, ServiceError> {
        let estimates = self.estimates(now_ms)?;
        Ok(restock_alerts(&self.inventory.chemical_index(), &estimates, now_ms))
    }
}

/// Number of leading log events the chain already covers; entries must
/// reference log indices 0, 1, 2, ... in order.
pub fn chained_events(entries: &[AuditEntry]) -> Result<u64, ServiceError> {
    let mut next = 0u64;
    for e in entries {
        let rec: AuditRecord = serde_json::from_str(&e.payload)
            .map_err(|err| ServiceError::Recovery(format!("audit entry {}: {err}", e.index)))?;
        if let AuditRecord::InventoryEvent { log_index, .. } = rec {
            if log_index != next {
                return Err(ServiceError::Recovery(format!(
                    "audit entry {} covers event {log_index}, expected {next}",
                    e.index
                )));
            }
            next += 1;
        }
    }
    Ok(next)
}
