use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tempfile::TempDir;
use zonegate_core::{EntryJitter, TransitLaw, ZonePolicy};
use zonegate_service::{read_log, replay, verify, App, ManualClock, ServiceConfig, WireRequest};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn zonegate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zonegate"))
        .args(args)
        .env_remove("ZONEGATE_CONFIG")
        .env_remove("ZONEGATE_LISTEN")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = zonegate(args);
    assert!(
        out.status.success(),
        "zonegate {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn demand_gen_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let spec = configs().join("demand/two_phase_bursty.json");
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let common = ["demand", "gen", "--spec", path_str(&spec), "--horizon", "86400", "--seed", "3"];
    let summary = ok(&[&common[..], &["--out", path_str(&a)]].concat());
    ok(&[&common[..], &["--out", path_str(&b)]].concat());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count() as u64, summary["events"].as_u64().unwrap());
    let requests: usize = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["requests"].as_array().unwrap().len())
        .sum();
    assert_eq!(requests as u64, summary["requests"].as_u64().unwrap());

    let halved = ok(&[
        &common[..],
        &["--out", path_str(&b), "--rate-multiplier", "0.5"],
    ]
    .concat());
    assert_eq!(
        halved["mean_arrival_rate"].as_f64().unwrap() * 2.0,
        summary["mean_arrival_rate"].as_f64().unwrap()
    );
}

#[test]
fn sim_run_writes_metrics_and_trace() {
    let dir = TempDir::new().unwrap();
    let scenario = configs().join("scenarios/weekday.json");
    let metrics = dir.path().join("m.json");
    let (t1, t2) = (dir.path().join("t1.jsonl"), dir.path().join("t2.jsonl"));
    let args = |trace: &Path, seed: &str| {
        vec![
            "sim".to_string(),
            "run".into(),
            "--scenario".into(),
            path_str(&scenario).into(),
            "--seed".into(),
            seed.into(),
            "--metrics".into(),
            path_str(&metrics).into(),
            "--trace".into(),
            path_str(trace).into(),
        ]
    };
    let run = |a: Vec<String>| ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let printed = run(args(&t1, "5"));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(printed, written);
    let total = ["grant_rate", "offer_rate", "paid_share", "reject_rate"]
        .iter()
        .map(|k| written[k].as_f64().unwrap())
        .sum::<f64>();
    assert!((total - 1.0).abs() < 1e-9, "{total}");

    run(args(&t2, "5"));
    assert_eq!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());
    run(args(&t2, "6"));
    assert_ne!(std::fs::read(&t1).unwrap(), std::fs::read(&t2).unwrap());
    let first: Value = serde_json::from_str(std::fs::read_to_string(&t1).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "request");
}

#[test]
fn sim_compare_writes_one_row_per_variant() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("table.csv");
    let summary = ok(&[
        "sim",
        "compare",
        "--scenario",
        path_str(&configs().join("scenarios/dominance.json")),
        "--variants",
        path_str(&configs().join("variants.json")),
        "--reps",
        "2",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(summary["variants"], 4);
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "variant");
    assert_eq!(&header[1], "replications");
    assert_eq!(&header[2], "grant_rate_mean");
    assert_eq!(&header[3], "grant_rate_se");
    assert_eq!(header.len(), 2 + 2 * zonegate_core::METRIC_NAMES.len());
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["baseline", "strict_threshold", "half_hour_slots", "no_bunker"]);
    assert!(rows.iter().all(|r| &r[1] == "2"));
}

#[test]
fn opt_grid_picks_short_slots_on_the_dominance_scenario() {
    let dir = TempDir::new().unwrap();
    let scenario: Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("scenarios/dominance.json")).unwrap()).unwrap();
    let space = dir.path().join("space.json");
    std::fs::write(
        &space,
        json!({
            "delta_s": [600, 1800],
            "rho_free": [0.5],
            "slack": [0.5],
            "replications": 2,
            "scenario": scenario,
        })
        .to_string(),
    )
    .unwrap();
    let (out, best) = (dir.path().join("grid.csv"), dir.path().join("best.json"));
    ok(&[
        "opt",
        "grid",
        "--space",
        path_str(&space),
        "--out",
        path_str(&out),
        "--best",
        path_str(&best),
    ]);
    let best: Value = serde_json::from_str(&std::fs::read_to_string(&best).unwrap()).unwrap();
    assert_eq!(best["delta_s"], 600);
    assert_eq!(best["rho_hard"], 1.0);
    assert_eq!(best["weights"]["w_offset"], 0.25);
    let mut reader = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().take(5).collect::<Vec<_>>(),
        ["delta_s", "rho_free", "slack", "mean_objective", "se"]
    );
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let objective = |r: &csv::StringRecord| r[3].parse::<f64>().unwrap();
    assert!(objective(&rows[0]) < objective(&rows[1]));
}

fn session_log(dir: &Path) -> (ServiceConfig, Arc<App>) {
    let policy = ZonePolicy {
        zone_id: "A1".into(),
        capacity: 2,
        slot_length_s: 600,
        rho_free: 0.5,
        rho_hard: 1.0,
        horizon_slots: 12,
        k_alternatives: 2,
        transit: TransitLaw::PointMass { value: 600.0 },
        entry_jitter: EntryJitter::PointMassAtStart,
        ..ZonePolicy::default()
    };
    let config = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        policy_path: dir.join("zone.json"),
        offer_ttl_s: 300.0,
        log_path: dir.join("events.jsonl"),
        mode: None,
        snapshot_every: 3,
        horizon_start_unix_s: None,
        fsync: false,
    };
    std::fs::write(&config.policy_path, serde_json::to_string(&policy).unwrap()).unwrap();
    let app = App::open(&config, Arc::new(ManualClock::new(1e6))).unwrap();
    for (slot, pay) in [(4, false), (4, false), (4, true), (4, true), (7, false)] {
        let wire = WireRequest {
            desired_slot: Some(slot),
            flexibility_s: Some(600),
            willing_to_pay: pay,
            ..WireRequest::default()
        };
        app.submit("A1", &wire).unwrap();
    }
    (config, app)
}

#[test]
fn replay_verifies_a_session_log() {
    let dir = TempDir::new().unwrap();
    let (config, app) = session_log(dir.path());
    let state = dir.path().join("state.json");
    let report = ok(&[
        "replay",
        "--log",
        path_str(&config.log_path),
        "--verify",
        "--out",
        path_str(&state),
    ]);
    assert_eq!(report["status"], "ok");
    assert_eq!(report["report"]["records"], app.seq());
    assert_eq!(report["report"]["decisions_checked"], 5);
    assert!(report["report"]["snapshot_seq"].as_u64().unwrap() > 0);
    assert_eq!(std::fs::read_to_string(&state).unwrap(), app.state_json());

    let plain = ok(&["replay", "--log", path_str(&config.log_path)]);
    assert_eq!(plain["records"], app.seq());
}

#[test]
fn replay_reports_the_first_corrupt_record() {
    let dir = TempDir::new().unwrap();
    let (config, _app) = session_log(dir.path());
    let text = std::fs::read_to_string(&config.log_path).unwrap();
    let broken: String = text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != 3)
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    let path = dir.path().join("broken.jsonl");
    std::fs::write(&path, broken).unwrap();
    let out = zonegate(&["replay", "--log", path_str(&path)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("CORRUPT_LOG at seq 4"), "{stderr}");
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let out = zonegate(&["sim", "run", "--scenario", "/nonexistent.json", "--metrics", "/tmp/x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.json"));

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"kernel": 3}"#).unwrap();
    let out = zonegate(&["demand", "gen", "--spec", path_str(&bad), "--horizon", "10", "--out", "/tmp/x"]);
    assert!(!out.status.success());

    let out = zonegate(&["serve"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

fn http(addr: SocketAddr, request: &str) -> Option<String> {
    let mut stream = TcpStream::connect_timeout(&addr, Duration::from_millis(200)).ok()?;
    stream.write_all(request.as_bytes()).ok()?;
    let mut response = String::new();
    stream.read_to_string(&mut response).ok()?;
    Some(response)
}

#[test]
fn serve_takes_config_and_listen_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let (config, _app) = session_log(dir.path());
    drop(_app);
    let config_path = dir.path().join("service.json");
    std::fs::write(
        &config_path,
        json!({"policy_path": "zone.json", "log_path": "events.jsonl", "listen": "127.0.0.1:1"}).to_string(),
    )
    .unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr: SocketAddr = format!("127.0.0.1:{port}").parse().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_zonegate"))
        .arg("serve")
        .env("ZONEGATE_CONFIG", &config_path)
        .env("ZONEGATE_LISTEN", addr.to_string())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();

    let deadline = Instant::now() + Duration::from_secs(20);
    let health = loop {
        if let Some(r) = http(addr, &format!("GET /healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n")) {
            break r;
        }
        assert!(Instant::now() < deadline, "service did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");

    let body = r#"{"desired_slot":7,"flexibility_s":0}"#;
    let response = http(
        addr,
        &format!(
            "POST /zones/A1/requests HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
    )
    .unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let decision: Value = serde_json::from_str(&response[response.find("\r\n\r\n").unwrap() + 4..]).unwrap();
    // slot 7 already holds one of its two units from the recovered session
    assert_eq!(decision["decision"], "reject");

    let records = read_log(&config.log_path).unwrap();
    let (state, _) = verify(&records, None).unwrap();
    assert_eq!(state.canonical_json(), replay(&records).unwrap().canonical_json());
    assert_eq!(state.counters.requests, 6);
}
