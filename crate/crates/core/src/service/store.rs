use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{AuditRecord, Record, Snapshot};
use super::ServiceError;
use crate::audit::{verify_text, AuditEntry};
use crate::inventory::{decode_event, InventoryEvent};

pub const EVENTS_FILE: &str = "events.ndjson";
pub const AUDIT_FILE: &str = "audit.ndjson";
pub const ROOTS_FILE: &str = "roots.ndjson";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// Line of the checkpoint-root sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub index: u64,
    pub root: String,
    pub timestamp_ms: i64,
}

/// What recovery had to repair, for logging.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub events: u64,
    pub audit_entries: u64,
    pub torn_bytes_dropped: u64,
    pub audit_entries_dropped: u64,
    pub snapshot_used: bool,
}

pub struct Recovered {
    pub events: Vec<InventoryEvent>,
    pub audit: Vec<AuditEntry>,
    pub snapshot: Option<Snapshot>,
    pub report: RecoveryReport,
}

/// Append-only files plus an atomically replaced snapshot, all in one
/// directory.
pub struct Store {
    dir: PathBuf,
    events: File,
    audit: File,
    roots: File,
}

/// Drops a trailing partial line left by an interrupted append.
fn cut_torn_tail(path: &Path) -> Result<(String, u64), ServiceError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((String::new(), 0)),
        Err(e) => return Err(ServiceError::io(path, e)),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let dropped = (bytes.len() - keep) as u64;
    if dropped > 0 {
        let f = OpenOptions::new().write(true).open(path).map_err(|e| ServiceError::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| ServiceError::io(path, e))?;
        f.sync_all().map_err(|e| ServiceError::io(path, e))?;
    }
    let text = String::from_utf8(bytes[..keep].to_vec())
        .map_err(|e| ServiceError::Recovery(format!("{} is not UTF-8: {e}", path.display())))?;
    Ok((text, dropped))
}

fn append_file(path: &Path) -> Result<File, ServiceError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ServiceError::io(path, e))
}

impl Store {
    /// Opens (creating if needed) the data directory and reads back
    /// everything that was durably written.
    pub fn open(dir: impl Into<PathBuf>) -> Result<(Store, Recovered), ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        let mut report = RecoveryReport::default();

        let events_path = dir.join(EVENTS_FILE);
        let (text, torn) = cut_torn_tail(&events_path)?;
        report.torn_bytes_dropped += torn;
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            events.push(decode_event(line).map_err(|e| {
                ServiceError::Recovery(format!("{} line {}: {e}", events_path.display(), i + 1))
            })?);
        }

        let audit_path = dir.join(AUDIT_FILE);
        let (text, torn) = cut_torn_tail(&audit_path)?;
        report.torn_bytes_dropped += torn;
        verify_text(&text).map_err(|b| ServiceError::AuditCorrupt {
            path: audit_path.clone(),
            index: b.index,
        })?;
        let mut audit = Vec::new();
        let mut keep_bytes = 0usize;
        for line in text.lines() {
            let entry = AuditEntry::from_line(line).expect("verified above");
            let rec: AuditRecord = serde_json::from_str(&entry.payload)
                .map_err(|e| ServiceError::Recovery(format!("audit entry {}: {e}", entry.index)))?;
            // Entries for events the log lost in a crash go too, so the chain
            // is a prefix consistent with the log.
            if let AuditRecord::InventoryEvent { log_index, .. } = rec {
                if log_index >= events.len() as u64 {
                    break;
                }
            }
            keep_bytes += line.len() + 1;
            audit.push(entry);
        }
        if keep_bytes < text.len() {
            report.audit_entries_dropped = text[keep_bytes..].lines().count() as u64;
            let f = OpenOptions::new()
                .write(true)
                .open(&audit_path)
                .map_err(|e| ServiceError::io(&audit_path, e))?;
            f.set_len(keep_bytes as u64).map_err(|e| ServiceError::io(&audit_path, e))?;
            f.sync_all().map_err(|e| ServiceError::io(&audit_path, e))?;
        }

        let snap_path = dir.join(SNAPSHOT_FILE);
        let snapshot = match fs::read(&snap_path) {
            Ok(b) => serde_json::from_slice::<Snapshot>(&b).ok(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(ServiceError::io(&snap_path, e)),
        };
        report.snapshot_used = snapshot
            .as_ref()
            .is_some_and(|s| s.log_len <= events.len() as u64);
        report.events = events.len() as u64;
        report.audit_entries = audit.len() as u64;

        let roots_path = dir.join(ROOTS_FILE);
        cut_torn_tail(&roots_path)?;
        let store = Store {
            events: append_file(&events_path)?,
            audit: append_file(&audit_path)?,
            roots: append_file(&roots_path)?,
            dir,
        };
        Ok((
            store,
            Recovered {
                events,
                audit,
                snapshot,
                report,
            },
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes event lines, then audit lines, each file in one append.
    pub fn append(&mut self, records: &[Record]) -> Result<(), ServiceError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut events = String::new();
        let mut audit = String::new();
        for r in records {
            match r {
                Record::Event { line, audit: entry } => {
                    events.push_str(line);
                    events.push('\n');
                    audit.push_str(&entry.to_line());
                    audit.push('\n');
                }
                Record::Audit(entry) => {
                    audit.push_str(&entry.to_line());
                    audit.push('\n');
                }
            }
        }
        if !events.is_empty() {
            let path = self.dir.join(EVENTS_FILE);
            self.events.write_all(events.as_bytes()).map_err(|e| ServiceError::io(&path, e))?;
            self.events.sync_data().map_err(|e| ServiceError::io(&path, e))?;
        }
        let path = self.dir.join(AUDIT_FILE);
        self.audit.write_all(audit.as_bytes()).map_err(|e| ServiceError::io(&path, e))?;
        self.audit.sync_data().map_err(|e| ServiceError::io(&path, e))?;
        Ok(())
    }

    pub fn append_root(&mut self, cp: &Checkpoint) -> Result<(), ServiceError> {
        let path = self.dir.join(ROOTS_FILE);
        let mut line = serde_json::to_string(cp).expect("checkpoint serializes");
        line.push('\n');
        self.roots.write_all(line.as_bytes()).map_err(|e| ServiceError::io(&path, e))
    }

    /// Replaces the snapshot via write-temp-then-rename.
    pub fn write_snapshot(&self, snap: &Snapshot) -> Result<(), ServiceError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let bytes = serde_json::to_vec(snap).expect("snapshot serializes");
        let mut f = File::create(&tmp).map_err(|e| ServiceError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| ServiceError::io(&tmp, e))?;
        f.sync_all().map_err(|e| ServiceError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| ServiceError::io(&path, e))
    }
}
