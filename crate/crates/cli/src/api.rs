//! HTTP surface under `/api/v1`.
//!
//! Every JSON response carries `schema`. Lists are paginated with
//! `offset`/`limit` and timestamps are ISO-8601 UTC strings.

use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;
use xtray_core::audit::{to_hex, verify_bytes, Fault};
use xtray_core::forecast::{days_to_empty, iso_utc, RestockAlert};
use xtray_core::inventory::{
    Attribution, ChemicalRecord, ChemicalSummary, ConsumptionEntry, ContainerRecord, DailyTotal, InventoryError,
};
use xtray_core::service::{IngestReport, TrayStats, API_SCHEMA, AUDIT_FILE};
use xtray_core::{OperationEvent, Service, ServiceError, TagId, TrayId};

/// Milliseconds since the Unix epoch; injectable so tests can pin "now".
pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| Utc::now().timestamp_millis())
}

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;
const MAX_INGEST_BYTES: usize = 64 << 20;

/// Writers (ingest, registration, resolution) take the lock exclusively, so
/// per-tray processing and inventory writes are serialized; readers share it.
#[derive(Clone)]
pub struct AppState {
    svc: Arc<RwLock<Service>>,
    clock: Clock,
}

impl AppState {
    pub fn new(svc: Service, clock: Clock) -> Self {
        AppState {
            svc: Arc::new(RwLock::new(svc)),
            clock,
        }
    }

    fn read(&self) -> RwLockReadGuard<'_, Service> {
        self.svc.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Service> {
        self.svc.write().unwrap_or_else(|p| p.into_inner())
    }

    fn now(&self) -> i64 {
        (self.clock)()
    }
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.read().pipeline().config().static_dir.clone();
    let api = Router::new()
        .route("/ingest", post(ingest))
        .route("/chemicals", get(list_chemicals).post(create_chemical))
        .route("/chemicals/{id}/history", get(history))
        .route("/containers", post(create_container))
        .route("/containers/{tag}", get(container))
        .route("/trays", get(list_trays))
        .route("/trays/{id}/events", get(tray_events))
        .route("/alerts", get(alerts))
        .route("/ambiguous", get(list_ambiguous))
        .route("/ambiguous/{event_id}/resolve", post(resolve))
        .route("/audit/verify", get(verify_audit))
        .route("/notes", post(note))
        .fallback(|uri: Uri| async move {
            ApiError::NotFound {
                kind: "route",
                id: uri.path().to_string(),
            }
        })
        .layer(DefaultBodyLimit::max(MAX_INGEST_BYTES));
    let app = Router::new().nest("/api/v1", api).with_state(state);
    match static_dir {
        Some(dir) if dir.is_dir() => app.fallback_service(ServeDir::new(dir)),
        _ => app,
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound { kind: &'static str, id: String },
    BadRequest(String),
    Conflict(String),
    Invalid { message: String, detail: serde_json::Value },
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound { kind, id } => (
                StatusCode::NOT_FOUND,
                json!({"schema": API_SCHEMA, "error": "not_found", "kind": kind, "id": id,
                       "message": format!("no {kind} {id:?}")}),
            ),
            ApiError::BadRequest(m) => (
                StatusCode::BAD_REQUEST,
                json!({"schema": API_SCHEMA, "error": "bad_request", "message": m}),
            ),
            ApiError::Conflict(m) => (
                StatusCode::CONFLICT,
                json!({"schema": API_SCHEMA, "error": "conflict", "message": m}),
            ),
            ApiError::Invalid { message, detail } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"schema": API_SCHEMA, "error": "validation", "message": message, "detail": detail}),
            ),
            ApiError::Internal(m) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"schema": API_SCHEMA, "error": "internal", "message": m}),
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Inventory(inv) => inv.into(),
            ServiceError::Forecast(f) => ApiError::Internal(f.to_string()),
            other => {
                tracing::error!(error = %other, "request failed");
                ApiError::Internal(other.to_string())
            }
        }
    }
}

impl From<InventoryError> for ApiError {
    fn from(e: InventoryError) -> Self {
        let message = e.to_string();
        match e {
            InventoryError::UnknownChemical(id) => ApiError::NotFound { kind: "chemical", id },
            InventoryError::UnknownContainer(tag) => ApiError::NotFound {
                kind: "container",
                id: tag.to_string(),
            },
            InventoryError::UnknownParkedEvent(id) => ApiError::NotFound {
                kind: "ambiguous_event",
                id: id.to_string(),
            },
            InventoryError::DuplicateTag { .. } | InventoryError::DuplicateChemical(_) | InventoryError::AlreadyResolved(_) => {
                ApiError::Conflict(message)
            }
            InventoryError::SumMismatch { expected, got } => ApiError::Invalid {
                message,
                detail: json!({"expected_g": expected, "got_g": got, "residual_g": expected - got}),
            },
            _ => ApiError::Invalid {
                message,
                detail: serde_json::Value::Null,
            },
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct Page<T> {
    pub schema: u32,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<T>,
}

fn paginate<T>(all: impl IntoIterator<Item = T>, q: &PageQuery) -> Page<T> {
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT).min(MAX_LIMIT);
    let all: Vec<T> = all.into_iter().collect();
    let total = all.len();
    let items = all.into_iter().skip(q.offset).take(limit).collect();
    Page {
        schema: API_SCHEMA,
        total,
        offset: q.offset,
        limit,
        items,
    }
}

#[derive(Debug, Serialize)]
pub struct EventView {
    #[serde(flatten)]
    pub event: OperationEvent,
    pub t_start: String,
    pub t_end: String,
}

impl From<OperationEvent> for EventView {
    fn from(event: OperationEvent) -> Self {
        EventView {
            t_start: iso_utc(event.t_start_ms),
            t_end: iso_utc(event.t_end_ms),
            event,
        }
    }
}

async fn ingest(State(st): State<AppState>, body: Bytes) -> ApiResult<IngestReport> {
    let report = st.write().ingest(&body)?;
    if !report.rejected.is_empty() {
        tracing::warn!(rejected = report.rejected.len(), "ingest rejected frames");
    }
    Ok(Json(report))
}

#[derive(Debug, Serialize)]
pub struct ChemicalRow {
    #[serde(flatten)]
    pub summary: ChemicalSummary,
    pub ewma_g_per_day: f64,
    /// Absent when nothing is being consumed.
    pub days_to_empty: Option<f64>,
}

async fn list_chemicals(State(st): State<AppState>, Query(q): Query<PageQuery>) -> ApiResult<Page<ChemicalRow>> {
    let now = st.now();
    let svc = st.read();
    let estimates = svc.pipeline().estimates(now)?;
    let mut rows = Vec::new();
    for summary in svc.pipeline().inventory().chemical_index() {
        let est = &estimates[&summary.chemical_id];
        let dte = days_to_empty(summary.available_g, est).map_err(ServiceError::from)?;
        rows.push(ChemicalRow {
            ewma_g_per_day: est.ewma_g_per_day,
            days_to_empty: dte.days(),
            summary,
        });
    }
    Ok(Json(paginate(rows, &q)))
}

async fn create_chemical(
    State(st): State<AppState>,
    Json(rec): Json<ChemicalRecord>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let id = rec.chemical_id.clone();
    st.write().register_chemical(rec)?;
    Ok((StatusCode::CREATED, Json(json!({"schema": API_SCHEMA, "chemical_id": id}))))
}

#[derive(Debug, Deserialize)]
pub struct HistoryQuery {
    pub from: Option<String>,
    pub to: Option<String>,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

/// Accepts RFC 3339 instants or bare `YYYY-MM-DD` dates (UTC midnight).
fn parse_instant(field: &str, s: &str) -> Result<i64, ApiError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp_millis());
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp_millis());
    }
    Err(ApiError::BadRequest(format!("{field}: {s:?} is not an ISO-8601 date or instant")))
}

#[derive(Debug, Serialize)]
pub struct EntryView {
    #[serde(flatten)]
    pub entry: ConsumptionEntry,
    pub t_out: String,
    pub t_in: String,
}

#[derive(Debug, Serialize)]
pub struct HistoryView {
    pub schema: u32,
    pub chemical_id: String,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub entries: Vec<EntryView>,
    /// Every day in the selected range with consumption, refills excluded.
    pub daily: Vec<DailyTotal>,
}

async fn history(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HistoryQuery>,
) -> ApiResult<HistoryView> {
    let from = q.from.as_deref().map(|s| parse_instant("from", s)).transpose()?;
    let to = q.to.as_deref().map(|s| parse_instant("to", s)).transpose()?;
    let svc = st.read();
    let h = svc
        .pipeline()
        .inventory()
        .consumption_history(&id, from.unwrap_or(i64::MIN), to.unwrap_or(i64::MAX))?;
    let page = paginate(
        h.entries.into_iter().map(|entry| EntryView {
            t_out: iso_utc(entry.t_out_ms),
            t_in: iso_utc(entry.t_in_ms),
            entry,
        }),
        &PageQuery {
            offset: q.offset,
            limit: q.limit,
        },
    );
    Ok(Json(HistoryView {
        schema: API_SCHEMA,
        chemical_id: h.chemical_id,
        total: page.total,
        offset: page.offset,
        limit: page.limit,
        entries: page.items,
        daily: h.daily,
    }))
}

#[derive(Debug, Deserialize)]
pub struct NewContainer {
    pub tag_id: TagId,
    pub chemical_id: String,
    pub tare_g: f64,
    pub gross_g: f64,
}

async fn create_container(
    State(st): State<AppState>,
    Json(c): Json<NewContainer>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let now = st.now();
    st.write()
        .register_container(c.tag_id.clone(), &c.chemical_id, c.tare_g, c.gross_g, now)?;
    Ok((StatusCode::CREATED, Json(json!({"schema": API_SCHEMA, "tag_id": c.tag_id}))))
}

#[derive(Debug, Serialize)]
pub struct ContainerView {
    pub schema: u32,
    #[serde(flatten)]
    pub record: ContainerRecord,
    pub chemical_name: Option<String>,
    pub net_g: f64,
    pub checked_out: bool,
    pub registered_at: String,
    pub checked_out_at: Option<String>,
}

async fn container(State(st): State<AppState>, Path(tag): Path<String>) -> ApiResult<ContainerView> {
    let not_found = || ApiError::NotFound {
        kind: "container",
        id: tag.clone(),
    };
    let tag_id = TagId::parse(tag.as_str()).map_err(|_| not_found())?;
    let svc = st.read();
    let inv = svc.pipeline().inventory();
    let rec = inv.container(&tag_id).ok_or_else(not_found)?.clone();
    Ok(Json(ContainerView {
        schema: API_SCHEMA,
        chemical_name: inv.chemical(&rec.chemical_id).map(|c| c.name.clone()),
        net_g: rec.net_g(),
        checked_out: rec.is_checked_out(),
        registered_at: iso_utc(rec.registered_at_ms),
        checked_out_at: rec.checkout.as_ref().map(|c| iso_utc(c.t_out_ms)),
        record: rec,
    }))
}

#[derive(Debug, Serialize)]
pub struct TrayView {
    pub tray_id: TrayId,
    pub events: usize,
    #[serde(flatten)]
    pub stats: TrayStats,
}

async fn list_trays(State(st): State<AppState>, Query(q): Query<PageQuery>) -> ApiResult<Page<TrayView>> {
    let svc = st.read();
    let p = svc.pipeline();
    let rows: Vec<TrayView> = p
        .config()
        .trays
        .keys()
        .map(|t| TrayView {
            tray_id: t.clone(),
            events: p.tray_events(t).map_or(0, <[_]>::len),
            stats: p.stats(t).cloned().unwrap_or_default(),
        })
        .collect();
    Ok(Json(paginate(rows, &q)))
}

async fn tray_events(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Page<EventView>> {
    let not_found = || ApiError::NotFound {
        kind: "tray",
        id: id.clone(),
    };
    let tray = TrayId::new(id.as_str()).map_err(|_| not_found())?;
    let svc = st.read();
    let events = svc.pipeline().tray_events(&tray).ok_or_else(not_found)?;
    Ok(Json(paginate(events.iter().cloned().map(EventView::from), &q)))
}

#[derive(Debug, Serialize)]
pub struct AlertsView {
    pub schema: u32,
    pub generated_at: String,
    pub items: Vec<RestockAlert>,
}

async fn alerts(State(st): State<AppState>) -> ApiResult<AlertsView> {
    let now = st.now();
    let items = st.read().pipeline().alerts(now)?;
    Ok(Json(AlertsView {
        schema: API_SCHEMA,
        generated_at: iso_utc(now),
        items,
    }))
}

#[derive(Debug, Serialize)]
pub struct ParkedView {
    pub id: u64,
    pub event: EventView,
}

async fn list_ambiguous(State(st): State<AppState>, Query(q): Query<PageQuery>) -> ApiResult<Page<ParkedView>> {
    let svc = st.read();
    let rows: Vec<ParkedView> = svc
        .pipeline()
        .inventory()
        .ambiguous()
        .map(|p| ParkedView {
            id: p.id,
            event: p.event.clone().into(),
        })
        .collect();
    Ok(Json(paginate(rows, &q)))
}

#[derive(Debug, Deserialize)]
pub struct ResolveRequest {
    pub attribution: Vec<Attribution>,
}

#[derive(Debug, Serialize)]
pub struct ResolveView {
    pub schema: u32,
    pub id: u64,
    pub operations: Vec<EventView>,
}

async fn resolve(
    State(st): State<AppState>,
    Path(event_id): Path<String>,
    Json(req): Json<ResolveRequest>,
) -> ApiResult<ResolveView> {
    let id: u64 = event_id.parse().map_err(|_| ApiError::NotFound {
        kind: "ambiguous_event",
        id: event_id.clone(),
    })?;
    let now = st.now();
    let ops = st.write().resolve(id, req.attribution, now)?;
    Ok(Json(ResolveView {
        schema: API_SCHEMA,
        id,
        operations: ops.into_iter().map(EventView::from).collect(),
    }))
}

#[derive(Debug, Serialize)]
pub struct AuditView {
    pub schema: u32,
    pub ok: bool,
    /// Verified entries (the clean prefix when `ok` is false).
    pub entries: u64,
    pub head: Option<String>,
    pub first_bad_index: Option<u64>,
    pub fault: Option<Fault>,
    /// "file" when the on-disk chain was checked, "memory" otherwise.
    pub source: &'static str,
}

async fn verify_audit(State(st): State<AppState>) -> ApiResult<AuditView> {
    let svc = st.read();
    let chain = svc.pipeline().chain();
    let (source, result) = match svc.data_dir() {
        Some(dir) => {
            let path = dir.join(AUDIT_FILE);
            let bytes = std::fs::read(&path).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
            ("file", verify_bytes(&bytes).map(|_| ()))
        }
        None => ("memory", chain.verify()),
    };
    let view = match result {
        Ok(()) => AuditView {
            schema: API_SCHEMA,
            ok: true,
            entries: chain.len(),
            head: (!chain.is_empty()).then(|| to_hex(&chain.head())),
            first_bad_index: None,
            fault: None,
            source,
        },
        Err(bad) => AuditView {
            schema: API_SCHEMA,
            ok: false,
            entries: bad.index,
            head: None,
            first_bad_index: Some(bad.index),
            fault: Some(bad.fault),
            source,
        },
    };
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
pub struct NoteRequest {
    pub note: serde_json::Value,
}

async fn note(
    State(st): State<AppState>,
    Json(req): Json<NoteRequest>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let now = st.now();
    let entry = st.write().note(req.note, now)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "schema": API_SCHEMA,
            "index": entry.index,
            "entry_hash": to_hex(&entry.entry_hash),
            "timestamp": iso_utc(entry.timestamp_ms),
        })),
    ))
}
