use mindgap_cli::{load_deployment, load_script, open_service};
use mindgap_core::service::{Checkin, ServiceConfig, StartSessionRequest};
use mindgap_core::simulator::PatientScript;
use mindgap_core::SessionType;
use std::fs;
use std::process::{Command, Stdio};

fn mindgap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mindgap"))
}

#[test]
fn simulate_then_verify_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let log = dir.path().join("log.jsonl");
    let status = mindgap()
        .args(["simulate", "--script", "marcus", "--weeks", "4"])
        .arg("--out")
        .arg(&out)
        .arg("--log")
        .arg(&log)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["weeks"], 4);
    assert_eq!(report["violations"], serde_json::json!([]));

    let verified = mindgap().arg("verify").arg("--log").arg(&log).output().unwrap();
    assert_eq!(verified.status.code(), Some(0), "{}", String::from_utf8_lossy(&verified.stdout));

    // Swapping two events of one session breaks timestamp order.
    let mut lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    lines.swap(3, 4);
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let verified = mindgap().arg("verify").arg("--log").arg(&log).output().unwrap();
    assert_eq!(verified.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&verified.stdout).contains("timestamps_decreasing"));
}

#[test]
fn serve_refuses_wildcard_bind_before_prompting() {
    let dir = tempfile::tempdir().unwrap();
    let out = mindgap()
        .args(["serve", "--bind", "0.0.0.0:8787"])
        .arg("--store")
        .arg(dir.path().join("events.mgl"))
        .arg("--config")
        .arg(dir.path().join("missing.json"))
        .env_remove(mindgap_cli::PASSPHRASE_ENV)
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0.0.0.0"), "{err}");
    assert!(!err.contains("passphrase"), "{err}");
}

#[test]
fn unknown_script_is_an_error() {
    assert!(load_script("no-such-script").is_err());
    assert_eq!(load_script("plateau").unwrap().name, "plateau");
}

#[test]
fn service_reopens_its_own_store() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let cfg = ServiceConfig {
        profile: PatientScript::marcus().profile,
        engine: Default::default(),
        zones: Default::default(),
        maintenance: Default::default(),
        window_days: 7,
    };
    fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let store = dir.path().join("events.mgl");
    let start = StartSessionRequest {
        session_type: SessionType::Daily,
        checkin: Checkin {
            activation: 5.0,
            body_markers: vec![],
        },
        timestamp_ms: 1_767_225_600_000,
    };
    {
        let mut svc = open_service(&store, "pw", None, &config).unwrap();
        assert_eq!(svc.handle_start(start).unwrap().session_id, "S000001");
    }
    let svc = open_service(&store, "pw", None, &config).unwrap();
    assert!(svc.health().store_sequence > 0);
    assert!(open_service(&store, "other", None, &config).is_err());
}

#[test]
fn deployment_directory_needs_templates() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_deployment(Some(dir.path())).is_err());
    assert!(load_deployment(None).is_ok());
}
