//! Offline subcommands. Each one is a thin wrapper over `xtray-core`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use xtray_core::audit::{verify_bytes, AuditEntry};
use xtray_core::forecast::{days_to_empty, iso_utc, RestockAlert};
use xtray_core::inventory::{ChemicalSummary, ConsumptionEntry, Flag, ParkedEvent};
use xtray_core::service::{IngestReport, Pipeline, API_SCHEMA};
use xtray_core::telemetry::encode_frame;
use xtray_core::tray_sim::{load_scenario, run};
use xtray_core::{Service, ServiceConfig};

use crate::error::CliError;

fn write_all(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn emit(out: &mut dyn Write, bytes: &[u8]) -> Result<(), CliError> {
    out.write_all(bytes).map_err(|e| CliError::io("<stdout>", e))
}

pub struct SimulateSummary {
    pub frames: usize,
    pub truth_events: usize,
}

/// Runs a scenario file; frames go to `out_path` or `stdout`.
pub fn simulate(
    scenario: &Path,
    out_path: Option<&Path>,
    truth_path: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<SimulateSummary, CliError> {
    let script = load_scenario(scenario).map_err(|e| CliError::Input(e.to_string()))?;
    let (frames, truth) = run(&script);
    let mut text = String::with_capacity(frames.len() * 96);
    for f in &frames {
        text.push_str(&encode_frame(f));
        text.push('\n');
    }
    match out_path {
        Some(p) => write_all(p, text.as_bytes())?,
        None => emit(stdout, text.as_bytes())?,
    }
    if let Some(p) = truth_path {
        let mut t = String::new();
        for ev in &truth {
            t.push_str(&serde_json::to_string(ev).expect("truth serializes"));
            t.push('\n');
        }
        write_all(p, t.as_bytes())?;
    }
    Ok(SimulateSummary {
        frames: frames.len(),
        truth_events: truth.len(),
    })
}

/// End-of-replay inventory as printed by `replay`.
#[derive(Serialize)]
pub struct InventoryDump<'a> {
    pub schema: u32,
    pub chemicals: Vec<ChemicalSummary>,
    pub ledger: &'a [ConsumptionEntry],
    pub ambiguous: Vec<&'a ParkedEvent>,
    pub flags: &'a [Flag],
    pub audit_entries: u64,
    pub audit_head: String,
}

impl<'a> InventoryDump<'a> {
    pub fn of(p: &'a Pipeline) -> Self {
        let inv = p.inventory();
        InventoryDump {
            schema: API_SCHEMA,
            chemicals: inv.chemical_index(),
            ledger: inv.ledger(),
            ambiguous: inv.ambiguous().collect(),
            flags: inv.flags(),
            audit_entries: p.chain().len(),
            audit_head: xtray_core::audit::to_hex(&p.chain().head()),
        }
    }
}

/// Runs a frames file through a fresh in-memory pipeline and prints one
/// event per line, a `---` separator and the final inventory.
pub fn replay(frames: &Path, config: &Path, out: &mut dyn Write) -> Result<IngestReport, CliError> {
    let cfg = ServiceConfig::load(config)?;
    let body = std::fs::read(frames).map_err(|e| CliError::io(frames, e))?;
    let mut svc = Service::in_memory(cfg)?;
    let report = svc.ingest(&body)?;
    let mut text = String::new();
    for ev in &report.events {
        text.push_str(&serde_json::to_string(ev).expect("event serializes"));
        text.push('\n');
    }
    text.push_str("---\n");
    let dump = InventoryDump::of(svc.pipeline());
    text.push_str(&serde_json::to_string_pretty(&dump).expect("inventory serializes"));
    text.push('\n');
    emit(out, text.as_bytes())?;
    Ok(report)
}

pub struct VerifySummary {
    pub entries: u64,
    pub head: Option<String>,
}

pub fn verify_audit(chain: &Path) -> Result<VerifySummary, CliError> {
    let bytes = std::fs::read(chain).map_err(|e| CliError::io(chain, e))?;
    let entries = verify_bytes(&bytes).map_err(|b| CliError::AuditInvalid {
        index: b.index,
        fault: b.fault,
    })?;
    // Verified, so every line is UTF-8 and canonical.
    let text = String::from_utf8(bytes).expect("verified chain is UTF-8");
    let head = text
        .lines()
        .last()
        .map(|l| AuditEntry::from_line(l).expect("verified line parses"))
        .map(|e| xtray_core::audit::to_hex(&e.entry_hash));
    Ok(VerifySummary { entries, head })
}

#[derive(Serialize)]
pub struct ForecastRow {
    pub chemical_id: String,
    pub available_g: f64,
    pub ewma_g_per_day: f64,
    pub days_observed: u32,
    /// Absent when nothing is being consumed.
    pub days_to_empty: Option<f64>,
}

#[derive(Serialize)]
pub struct ForecastReport {
    pub schema: u32,
    pub generated_at: String,
    pub chemicals: Vec<ForecastRow>,
    pub alerts: Vec<RestockAlert>,
}

pub fn forecast_report(p: &Pipeline, now_ms: i64) -> Result<ForecastReport, CliError> {
    let estimates = p.estimates(now_ms)?;
    let mut chemicals = Vec::new();
    for ch in p.inventory().chemical_index() {
        let est = &estimates[&ch.chemical_id];
        let dte = days_to_empty(ch.available_g, est).map_err(xtray_core::ServiceError::from)?;
        chemicals.push(ForecastRow {
            chemical_id: ch.chemical_id,
            available_g: ch.available_g,
            ewma_g_per_day: est.ewma_g_per_day,
            days_observed: est.days_observed,
            days_to_empty: dte.days(),
        });
    }
    Ok(ForecastReport {
        schema: API_SCHEMA,
        generated_at: iso_utc(now_ms),
        chemicals,
        alerts: p.alerts(now_ms)?,
    })
}

/// Opens the configured data directory and prints rate estimates and
/// restock alerts as of `now_ms`.
pub fn forecast(config: &Path, now_ms: i64, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = ServiceConfig::load(config)?;
    let (svc, _) = Service::open(cfg)?;
    let report = forecast_report(svc.pipeline(), now_ms)?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    emit(out, text.as_bytes())
}
