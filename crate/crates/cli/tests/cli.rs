use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xtray_core::audit::AuditChain;
use xtray_core::tray_sim::{load_scenario, run, TruthEvent};
use xtray_core::OperationEvent;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn xtray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xtray"))
        .args(args)
        .env("XTRAY_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Copies the lab config next to a fresh data directory.
fn lab_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("lab.toml");
    std::fs::copy(fixture("lab.toml"), &cfg).unwrap();
    cfg
}

#[test]
fn simulate_empty_scenario_gives_base_weight_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("frames.ndjson");
    let o = xtray(&["simulate", s(&fixture("empty.scn")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 50);
    for l in lines {
        let f = xtray_core::telemetry::decode_frame(l.as_bytes()).unwrap();
        assert_eq!(f.weight_g, 500.0);
        assert!(f.tags.is_empty());
    }
}

#[test]
fn simulate_to_stdout_matches_file_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("frames.ndjson");
    xtray(&["simulate", s(&fixture("take_return.scn")), "--out", s(&out)]);
    let o = xtray(&["simulate", s(&fixture("take_return.scn"))]);
    assert_eq!(o.stdout, std::fs::read(&out).unwrap());
}

#[test]
fn replay_of_take_return_matches_golden_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.ndjson");
    let truth = dir.path().join("truth.ndjson");
    let o = xtray(&[
        "simulate",
        s(&fixture("take_return.scn")),
        "--out",
        s(&frames),
        "--truth",
        s(&truth),
    ]);
    assert!(o.status.success());
    let cfg = lab_config(dir.path());
    let o = xtray(&["replay", s(&frames), s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(printed, std::fs::read_to_string(fixture("take_return.golden")).unwrap());

    // The golden file is itself checked against the simulator's truth.
    let (events, _) = printed.split_once("---\n").unwrap();
    let events: Vec<OperationEvent> = events.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let truth: Vec<TruthEvent> = std::fs::read_to_string(&truth)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (_, direct) = run(&load_scenario(fixture("take_return.scn")).unwrap());
    assert_eq!(truth, direct);
    assert_eq!(events.len(), truth.len());
    for (e, t) in events.iter().zip(&truth) {
        assert_eq!(e.kind, t.kind);
        assert_eq!(e.tag_id, t.tag_id);
        assert_eq!(e.delta_g, t.delta_g);
        assert_eq!(e.user_badge, t.user_badge);
    }
}

#[test]
fn replay_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.ndjson");
    xtray(&["simulate", s(&fixture("take_return.scn")), "--out", s(&frames)]);
    let cfg = lab_config(dir.path());
    let a = xtray(&["replay", s(&frames), s(&cfg)]);
    let b = xtray(&["replay", s(&frames), s(&cfg)]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    // Offline replay never touches the data directory.
    assert!(!dir.path().join("state").exists());
}

fn chain_file(dir: &Path) -> PathBuf {
    let mut c = AuditChain::new();
    for i in 0..10 {
        c.append(&serde_json::json!({"n": i}), 1_000 + i).unwrap();
    }
    let text: String = c.entries().iter().map(|e| e.to_line() + "\n").collect();
    let p = dir.join("audit.ndjson");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn verify_audit_accepts_intact_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = chain_file(dir.path());
    let o = xtray(&["verify-audit", s(&p)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: 10 entries"));
}

#[test]
fn verify_audit_reports_first_bad_index() {
    let dir = tempfile::tempdir().unwrap();
    let p = chain_file(dir.path());
    let text = std::fs::read_to_string(&p).unwrap();
    let tampered: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 4 { l.replace("{\\\"n\\\":4}", "{\\\"n\\\":5}") } else { l.to_string() })
        .collect();
    assert_ne!(tampered.join("\n") + "\n", text);
    std::fs::write(&p, tampered.join("\n") + "\n").unwrap();
    let o = xtray(&["verify-audit", s(&p)]);
    assert_eq!(o.status.code(), Some(6));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "first bad index: 4");
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[AuditInvalid]"));
}

#[test]
fn missing_files_name_the_path_and_class() {
    let o = xtray(&["replay", "/nonexistent/frames.ndjson", s(&fixture("lab.toml"))]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[IoError]") && err.contains("/nonexistent/frames.ndjson"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "data_dir = \"x\"\nlisten_on = 1\n").unwrap();
    let o = xtray(&["forecast", s(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("listen_on"));

    let o = xtray(&["simulate", s(&fixture("lab.toml"))]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn forecast_reads_persisted_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lab_config(dir.path());
    let o = xtray(&["forecast", s(&cfg), "--now", "2024-01-02"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["generated_at"], "2024-01-02T00:00:00.000Z");
    assert_eq!(v["chemicals"][0]["chemical_id"], "ethanol");
    assert_eq!(v["chemicals"][0]["available_g"], 100.0);
    assert!(dir.path().join("state/audit.ndjson").exists());
}
