//! Ingestion service: configuration, the frame-to-ledger pipeline and its
//! on-disk persistence. The HTTP surface lives in the CLI crate.

mod config;
mod pipeline;
mod store;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{ContainerSeed, ServiceConfig, API_SCHEMA, CONFIG_SCHEMA, SNAPSHOT_SCHEMA};
pub use pipeline::{
    chained_events, AuditRecord, IngestReport, Pipeline, Record, RejectReason, Rejection, SeqState, Snapshot,
    TrayStats,
};
pub use store::{
    Checkpoint, Recovered, RecoveryReport, Store, AUDIT_FILE, EVENTS_FILE, ROOTS_FILE, SNAPSHOT_FILE,
};

use crate::audit::{AuditEntry, AuditError};
use crate::engine::{EngineError, OperationEvent};
use crate::forecast::ForecastError;
use crate::inventory::{Attribution, ChemicalRecord, InventoryError};
use crate::telemetry::TagId;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("recovery failed: {0}")]
    Recovery(String),
    #[error("audit chain {path} fails verification at entry {index}")]
    AuditCorrupt { path: PathBuf, index: u64 },
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

impl ServiceError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

/// A pipeline, optionally backed by a data directory. Every mutating call
/// persists its records before returning.
pub struct Service {
    pipeline: Pipeline,
    store: Option<Store>,
}

impl Service {
    /// Runs without persistence.
    pub fn in_memory(config: ServiceConfig) -> Result<Self, ServiceError> {
        let mut pipeline = Pipeline::new(config)?;
        pipeline.seed_from_config()?;
        pipeline.take_uncommitted();
        Ok(Service { pipeline, store: None })
    }

    /// Opens the configured data directory, recovering any prior state.
    pub fn open(config: ServiceConfig) -> Result<(Self, RecoveryReport), ServiceError> {
        let (store, rec) = Store::open(&config.data_dir)?;
        let mut pipeline = Pipeline::restore(config, rec.events, rec.audit, rec.snapshot)?;
        pipeline.seed_from_config()?;
        let mut svc = Service {
            pipeline,
            store: Some(store),
        };
        svc.persist(true)?;
        tracing::info!(
            events = rec.report.events,
            audit_entries = rec.report.audit_entries,
            torn_bytes = rec.report.torn_bytes_dropped,
            audit_dropped = rec.report.audit_entries_dropped,
            snapshot = rec.report.snapshot_used,
            "recovered data directory"
        );
        Ok((svc, rec.report))
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// Backing directory, if persistent.
    pub fn data_dir(&self) -> Option<&Path> {
        self.store.as_ref().map(|s| s.dir())
    }

    fn persist(&mut self, snapshot: bool) -> Result<(), ServiceError> {
        let records = self.pipeline.take_uncommitted();
        let Some(store) = self.store.as_mut() else {
            return Ok(());
        };
        store.append(&records)?;
        if let Some(last) = records.iter().rev().find_map(|r| match r {
            Record::Event { audit, .. } | Record::Audit(audit) => Some(audit),
        }) {
            store.append_root(&Checkpoint {
                index: last.index,
                root: hex::encode(last.entry_hash),
                timestamp_ms: last.timestamp_ms,
            })?;
        }
        if snapshot || !records.is_empty() {
            store.write_snapshot(&self.pipeline.snapshot())?;
        }
        Ok(())
    }

    pub fn ingest(&mut self, body: &[u8]) -> Result<IngestReport, ServiceError> {
        let report = self.pipeline.ingest(body);
        // Persist whatever was committed even if a later frame failed.
        let persisted = self.persist(report.as_ref().is_ok_and(|r| r.accepted > 0));
        let report = report?;
        persisted?;
        Ok(report)
    }

    pub fn resolve(
        &mut self,
        parked_id: u64,
        attribution: Vec<Attribution>,
        at_ms: i64,
    ) -> Result<Vec<OperationEvent>, ServiceError> {
        let ops = self.pipeline.resolve(parked_id, attribution, at_ms)?;
        self.persist(false)?;
        Ok(ops)
    }

    pub fn register_chemical(&mut self, rec: ChemicalRecord) -> Result<(), ServiceError> {
        self.pipeline.register_chemical(rec)?;
        self.persist(false)
    }

    pub fn register_container(
        &mut self,
        tag_id: TagId,
        chemical_id: &str,
        tare_g: f64,
        gross_g: f64,
        at_ms: i64,
    ) -> Result<(), ServiceError> {
        self.pipeline
            .register_container(tag_id, chemical_id, tare_g, gross_g, at_ms)?;
        self.persist(false)
    }

    pub fn note(&mut self, note: serde_json::Value, at_ms: i64) -> Result<AuditEntry, ServiceError> {
        let entry = self.pipeline.note(note, at_ms)?;
        self.persist(false)?;
        Ok(entry)
    }
}
