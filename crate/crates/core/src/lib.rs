//! Core of the tray tracking system: wire format, simulator, event engine,
//! inventory ledger, forecasting, audit chain and the ingestion pipeline.

pub mod audit;
pub mod engine;
pub mod forecast;
pub mod inventory;
pub mod service;
pub mod telemetry;
pub mod tray_sim;

pub use audit::{AuditChain, AuditEntry};
pub use engine::{EventKind, OperationEvent, StabilityConfig, TrayTracker};
pub use inventory::Inventory;
pub use service::{Service, ServiceConfig, ServiceError};
pub use telemetry::{Calibration, TagId, TelemetryFrame, TrayId};
