use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use xtray_cli::api::{router, AppState};
use xtray_core::inventory::ChemicalRecord;
use xtray_core::service::ContainerSeed;
use xtray_core::telemetry::encode_frame;
use xtray_core::tray_sim::{run, ActionKind, NoiseModel, ScenarioScript, ScriptAction};
use xtray_core::{Calibration, Service, ServiceConfig, TagId, TelemetryFrame, TrayId};

const NOW_MS: i64 = 1_704_153_600_000; // 2024-01-02T00:00:00Z

fn tray() -> TrayId {
    TrayId::new("T1").unwrap()
}

fn config(dir: &Path, containers: &[(&str, f64, f64)]) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(dir);
    cfg.trays.insert(tray(), Calibration::default());
    if !containers.is_empty() {
        cfg.chemicals.push(ChemicalRecord {
            chemical_id: "ethanol".into(),
            name: "Ethanol".into(),
            hazard_class: "flammable".into(),
            unit: "g".into(),
            reorder_lead_time_days: 3.0,
        });
    }
    for &(name, tare_g, gross_g) in containers {
        cfg.containers.push(ContainerSeed {
            tag_id: TagId::container(name),
            chemical_id: "ethanol".into(),
            tare_g,
            gross_g,
        });
    }
    cfg
}

fn app(cfg: ServiceConfig) -> Router {
    let svc = Service::in_memory(cfg).unwrap();
    router(AppState::new(svc, Arc::new(|| NOW_MS)))
}

fn act(time_s: f64, kind: ActionKind, tag: &str, gross: Option<f64>, delta: Option<f64>) -> ScriptAction {
    ScriptAction {
        time_s,
        kind,
        tag_id: TagId::container(tag),
        gross_g: gross,
        delta_g: delta,
        settle_s: 0.5,
        badge: None,
    }
}

fn frames(actions: Vec<ScriptAction>) -> Vec<TelemetryFrame> {
    let mut s = ScenarioScript::new(tray(), 500.0, 10.0, 50.0);
    s.noise = NoiseModel::noiseless();
    s.actions = actions;
    run(&s).0
}

fn take_return() -> Vec<TelemetryFrame> {
    frames(vec![
        act(3.0, ActionKind::Place, "A", Some(150.0), None),
        act(10.0, ActionKind::Remove, "A", None, None),
        act(30.0, ActionKind::Place, "A", Some(140.0), None),
    ])
}

fn body(frames: &[TelemetryFrame]) -> String {
    frames.iter().map(|f| encode_frame(f) + "\n").collect()
}

async fn call(app: &Router, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, Body::empty()).await
}

#[tokio::test]
async fn chemicals_index_is_empty_for_empty_inventory() {
    let app = app(config(Path::new("unused"), &[]));
    let (status, v) = get(&app, "/api/v1/chemicals").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["total"], 0);
    assert_eq!(v["items"], json!([]));
}

#[tokio::test]
async fn ingest_reports_counts_and_line_numbers() {
    let app = app(config(Path::new("unused"), &[("A", 50.0, 150.0)]));
    let mut lines: Vec<String> = body(&take_return()[..100]).lines().map(str::to_string).collect();
    lines[6] = "{\"tray_id\":".to_string();
    let (status, v) = call(&app, "POST", "/api/v1/ingest", lines.join("\n")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["accepted"], 99);
    assert_eq!(v["rejected"][0]["line"], 7);
    assert_eq!(v["rejected"][0]["reason"], "malformed");

    let (_, again) = call(&app, "POST", "/api/v1/ingest", lines.join("\n")).await;
    assert_eq!(again["accepted"], 0);
    assert_eq!(again["duplicates"], 99);
}

#[tokio::test]
async fn container_detail_after_take_return() {
    let app = app(config(Path::new("unused"), &[("A", 50.0, 150.0)]));
    let (status, _) = call(&app, "POST", "/api/v1/ingest", body(&take_return())).await;
    assert_eq!(status, StatusCode::OK);
    let (status, v) = get(&app, "/api/v1/containers/C:A").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["net_g"], 90.0);
    assert_eq!(v["initial_gross_g"].as_f64().unwrap() - v["gross_g"].as_f64().unwrap(), 10.0);
    assert_eq!(v["location"], json!({"tray": "T1"}));
    assert_eq!(v["chemical_name"], "Ethanol");

    let (_, h) = get(&app, "/api/v1/chemicals/ethanol/history").await;
    assert_eq!(h["entries"][0]["amount_g"], 10.0);
    assert_eq!(h["entries"][0]["t_in"], "2024-01-01T00:00:31.400Z");
    assert_eq!(h["daily"], json!([{"day": "2024-01-01", "total_g": 10.0}]));
    let (_, h) = get(&app, "/api/v1/chemicals/ethanol/history?from=2024-01-02").await;
    assert_eq!(h["total"], 0);
    assert_eq!(h["daily"], json!([]));

    let (_, c) = get(&app, "/api/v1/chemicals").await;
    assert_eq!(c["items"][0]["available_g"], 90.0);
    // Ten grams on 2024-01-01, nothing yet on the 2nd: 0.3*0 + 0.7*10.
    assert_eq!(c["items"][0]["ewma_g_per_day"], 7.0);
}

#[tokio::test]
async fn tray_events_are_paginated_with_iso_times() {
    let app = app(config(Path::new("unused"), &[("A", 50.0, 150.0)]));
    call(&app, "POST", "/api/v1/ingest", body(&take_return())).await;
    let (status, v) = get(&app, "/api/v1/trays/T1/events?offset=1&limit=1").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["total"], 3);
    assert_eq!(v["offset"], 1);
    assert_eq!(v["limit"], 1);
    let items = v["items"].as_array().unwrap();
    assert_eq!(items.len(), 1);
    assert_eq!(items[0]["kind"], "remove");
    assert_eq!(items[0]["t_end"], "2024-01-01T00:00:11.400Z");

    let (_, trays) = get(&app, "/api/v1/trays").await;
    assert_eq!(trays["items"][0]["events"], 3);
    assert_eq!(trays["items"][0]["frames_accepted"], 500);
}

#[tokio::test]
async fn unknown_ids_are_echoed() {
    let app = app(config(Path::new("unused"), &[]));
    for (uri, id) in [
        ("/api/v1/trays/T9/events", "T9"),
        ("/api/v1/containers/C:nope", "C:nope"),
        ("/api/v1/containers/nope", "nope"),
        ("/api/v1/chemicals/acetone/history", "acetone"),
    ] {
        let (status, v) = get(&app, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["id"], id, "{uri}");
        assert_eq!(v["schema"], 1);
    }
    let (status, v) = call(&app, "POST", "/api/v1/ambiguous/42/resolve", r#"{"attribution":[]}"#).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["id"], "42");
}

#[tokio::test]
async fn resolution_must_sum_to_the_delta() {
    let app = app(config(Path::new("unused"), &[("A", 50.0, 150.0), ("B", 40.0, 120.0)]));
    // Both containers sit on the tray; 30 g leaves one of them in place.
    let f = frames(vec![
        act(3.0, ActionKind::Place, "A", Some(150.0), None),
        act(8.0, ActionKind::Place, "B", Some(120.0), None),
        act(20.0, ActionKind::DispenseInPlace, "A", None, Some(-30.0)),
    ]);
    call(&app, "POST", "/api/v1/ingest", body(&f)).await;
    let (_, q) = get(&app, "/api/v1/ambiguous").await;
    assert_eq!(q["total"], 1);
    let item = &q["items"][0];
    assert_eq!(item["event"]["kind"], "ambiguous");
    assert_eq!(item["event"]["delta_g"], -30.0);
    assert_eq!(item["event"]["candidates"], json!({"C:A": "present", "C:B": "present"}));
    let id = item["id"].as_u64().unwrap();

    let uri = format!("/api/v1/ambiguous/{id}/resolve");
    let bad = json!({"attribution": [{"tag_id": "C:A", "delta_g": -20.0}, {"tag_id": "C:B", "delta_g": -9.0}]});
    let (status, v) = call(&app, "POST", &uri, bad.to_string()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "validation");
    assert_eq!(v["detail"]["residual_g"], -1.0);

    let good = json!({"attribution": [{"tag_id": "C:A", "delta_g": -20.0}, {"tag_id": "C:B", "delta_g": -10.0}]});
    let (status, v) = call(&app, "POST", &uri, good.to_string()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["operations"].as_array().unwrap().len(), 2);
    let (_, q) = get(&app, "/api/v1/ambiguous").await;
    assert_eq!(q["total"], 0);
    let (_, a) = get(&app, "/api/v1/containers/C:A").await;
    assert_eq!(a["net_g"], 80.0);
    let (status, _) = call(&app, "POST", &uri, good.to_string()).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn audit_verify_checks_the_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("A", 50.0, 150.0)]);
    let (svc, _) = Service::open(cfg).unwrap();
    let app = router(AppState::new(svc, Arc::new(|| NOW_MS)));
    call(&app, "POST", "/api/v1/ingest", body(&take_return())).await;
    let (status, v) = call(&app, "POST", "/api/v1/notes", r#"{"note":{"sample":"S-12","result":"ok"}}"#).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["timestamp"], "2024-01-02T00:00:00.000Z");
    let (_, v) = get(&app, "/api/v1/audit/verify").await;
    assert_eq!(v["ok"], true);
    assert_eq!(v["source"], "file");
    assert_eq!(v["entries"], 6);

    let path = dir.path().join("audit.ndjson");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("\\\"delta_g\\\":-150.0", "\\\"delta_g\\\":-140.0", 1)).unwrap();
    let (_, v) = get(&app, "/api/v1/audit/verify").await;
    assert_eq!(v["ok"], false);
    assert_eq!(v["first_bad_index"], 3);
}

#[tokio::test]
async fn registration_endpoints() {
    let app = app(config(Path::new("unused"), &[]));
    let chem = json!({"chemical_id": "acetone", "name": "Acetone", "reorder_lead_time_days": 2.0});
    let (status, _) = call(&app, "POST", "/api/v1/chemicals", chem.to_string()).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = call(&app, "POST", "/api/v1/chemicals", chem.to_string()).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let c = json!({"tag_id": "C:X", "chemical_id": "acetone", "tare_g": 30.0, "gross_g": 230.0});
    let (status, _) = call(&app, "POST", "/api/v1/containers", c.to_string()).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, v) = get(&app, "/api/v1/containers/C:X").await;
    assert_eq!(v["net_g"], 200.0);
    assert_eq!(v["location"], "unplaced");
    assert_eq!(v["registered_at"], "2024-01-02T00:00:00.000Z");
    let bad = json!({"tag_id": "C:Y", "chemical_id": "acetone", "tare_g": 300.0, "gross_g": 230.0});
    let (status, _) = call(&app, "POST", "/api/v1/containers", bad.to_string()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, alerts) = get(&app, "/api/v1/alerts").await;
    assert_eq!(alerts["items"], json!([]));
    assert_eq!(alerts["generated_at"], "2024-01-02T00:00:00.000Z");
}
