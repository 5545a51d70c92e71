mod common;

use std::sync::Arc;

use axum::http::{Method, StatusCode};
use common::{call, harness, policy};
use serde_json::json;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::Barrier;
use zonegate_service::{read_log, replay, serve_on};

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn last_unit_is_granted_exactly_once() {
    let h = harness(policy(10, 0.5, 1.0));
    for _ in 0..4 {
        let (_, d) = h
            .call(Method::POST, "/zones/A1/requests", Some(json!({"desired_slot": 5, "flexibility_s": 0})))
            .await;
        assert_eq!(d["decision"], "grant");
    }
    let barrier = Arc::new(Barrier::new(100));
    let mut tasks = Vec::new();
    for _ in 0..100 {
        let app = h.app.clone();
        let barrier = barrier.clone();
        tasks.push(tokio::spawn(async move {
            barrier.wait().await;
            call(
                app,
                Method::POST,
                "/zones/A1/requests",
                Some(json!({"desired_slot": 5, "flexibility_s": 600})),
            )
            .await
        }));
    }
    let mut grants = Vec::new();
    let mut others = Vec::new();
    for t in tasks {
        let (status, body) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        if body["decision"] == "grant" {
            grants.push(body);
        } else {
            others.push(body);
        }
    }
    assert_eq!(grants.len(), 1);
    let grant_version = grants[0]["evaluated_against"].as_u64().unwrap();
    for o in &others {
        assert!(o["evaluated_against"].as_u64().unwrap() > grant_version);
    }
    let ledger = h.app.ledger();
    assert_eq!(ledger.counts(5), (5, 0));
    let records = read_log(&h.config.log_path).unwrap();
    assert_eq!(replay(&records).unwrap().canonical_json(), h.app.state_json());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn serves_over_tcp() {
    let h = harness(policy(10, 0.5, 1.0));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(listener, h.app.clone(), async {
        let _ = stopped.await;
    }));

    let body = r#"{"desired_slot":2,"flexibility_s":0}"#;
    let request = format!(
        "POST /zones/A1/requests HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream.write_all(request.as_bytes()).await.unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).await.unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let json_start = response.find("\r\n\r\n").unwrap() + 4;
    let value: serde_json::Value = serde_json::from_str(&response[json_start..]).unwrap();
    assert_eq!(value["decision"], "grant");

    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}
