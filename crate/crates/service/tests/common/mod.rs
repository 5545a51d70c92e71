#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;
use zonegate_core::{EntryJitter, TransitLaw, ZonePolicy};
use zonegate_service::{router, App, ManualClock, ServiceConfig};

pub const T0: f64 = 1_000_000.0;

pub struct Harness {
    pub dir: TempDir,
    pub config: ServiceConfig,
    pub clock: Arc<ManualClock>,
    pub app: Arc<App>,
}

pub fn policy(capacity: u32, rho_free: f64, rho_hard: f64) -> ZonePolicy {
    ZonePolicy {
        zone_id: "A1".into(),
        capacity,
        slot_length_s: 600,
        rho_free,
        rho_hard,
        horizon_slots: 12,
        flexibility_default_s: 1200,
        k_alternatives: 2,
        transit: TransitLaw::PointMass { value: 600.0 },
        entry_jitter: EntryJitter::PointMassAtStart,
        ..ZonePolicy::default()
    }
}

pub fn config_in(dir: &TempDir, snapshot_every: u64) -> ServiceConfig {
    ServiceConfig {
        listen: "127.0.0.1:0".into(),
        policy_path: dir.path().join("zone.json"),
        offer_ttl_s: 300.0,
        log_path: dir.path().join("events.jsonl"),
        mode: None,
        snapshot_every,
        horizon_start_unix_s: None,
        fsync: false,
    }
}

pub fn harness(policy: ZonePolicy) -> Harness {
    harness_with(policy, 0)
}

pub fn harness_with(policy: ZonePolicy, snapshot_every: u64) -> Harness {
    let dir = TempDir::new().unwrap();
    let config = config_in(&dir, snapshot_every);
    std::fs::write(&config.policy_path, serde_json::to_string(&policy).unwrap()).unwrap();
    let clock = Arc::new(ManualClock::new(T0));
    let app = App::open(&config, clock.clone()).unwrap();
    Harness {
        dir,
        config,
        clock,
        app,
    }
}

impl Harness {
    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        call(self.app.clone(), method, uri, body).await
    }
}

pub async fn call(app: Arc<App>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    call_raw(app, req).await
}

pub async fn call_raw(app: Arc<App>, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(app).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}
