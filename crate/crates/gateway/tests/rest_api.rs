use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use netsd_core::{FatVolume, PortId};
use netsd_gateway::rest::{router, Entry};
use netsd_gateway::{GatewayConfig, GatewayState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn state_with(faults: bool, capacity: u64) -> Arc<GatewayState> {
    let cfg = GatewayConfig {
        capacity,
        faults_enabled: faults,
        grant_wait: Duration::from_secs(2),
        seed: 11,
        ..Default::default()
    };
    GatewayState::from_config(&cfg).unwrap()
}

fn formatted(capacity: u64) -> Arc<GatewayState> {
    let state = state_with(true, capacity);
    let mut s = state.rag_session("setup").unwrap();
    FatVolume::format(&mut s.host).unwrap();
    drop(s);
    state
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn json_of(app: &Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let (code, bytes) = call(app, method, uri, body.to_string().into_bytes()).await;
    (code, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn holder(app: &Router) -> Value {
    json_of(app, "GET", "/api/v1/status", Value::Null).await.1["holder"].clone()
}

#[tokio::test]
async fn status_before_any_request() {
    let app = router(state_with(true, 4 << 20));
    let (code, s) = json_of(&app, "GET", "/api/v1/status", Value::Null).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(s["holder"], "dut");
    assert_eq!(s["lease_owner"], Value::Null);
    assert_eq!(s["nbd_session"], Value::Null);
    assert_eq!(s["capacity_bytes"], 4 << 20);
}

#[tokio::test]
async fn file_lifecycle() {
    let app = router(formatted(8 << 20));
    let (code, _) = call(&app, "PUT", "/api/v1/files/CONFIG.TXT", b"rate=9600\n".to_vec()).await;
    assert_eq!(code, StatusCode::CREATED);
    assert_eq!(holder(&app).await, "dut");

    let (code, body) = call(&app, "GET", "/api/v1/files/CONFIG.TXT", vec![]).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, b"rate=9600\n");

    let (code, _) = call(&app, "PUT", "/api/v1/files/config.txt", b"rate=115200\n".to_vec()).await;
    assert_eq!(code, StatusCode::OK);
    let (_, body) = call(&app, "GET", "/api/v1/files/CONFIG.TXT", vec![]).await;
    assert_eq!(body, b"rate=115200\n");

    let (code, _) = call(&app, "PUT", "/api/v1/files/LOGS/RUN1.LOG", vec![7; 5000]).await;
    assert_eq!(code, StatusCode::CREATED);
    let (code, body) = call(&app, "GET", "/api/v1/files/LOGS", vec![]).await;
    assert_eq!(code, StatusCode::OK);
    let listed: Vec<Entry> = serde_json::from_slice(&body).unwrap();
    assert_eq!(
        listed,
        [Entry {
            name: "RUN1.LOG".into(),
            dir: false,
            size: 5000
        }]
    );
    let (_, body) = call(&app, "GET", "/api/v1/files", vec![]).await;
    let mut root: Vec<Entry> = serde_json::from_slice(&body).unwrap();
    root.sort_by(|a, b| a.name.cmp(&b.name));
    let names: Vec<_> = root.iter().map(|e| (e.name.as_str(), e.dir)).collect();
    assert_eq!(names, [("CONFIG.TXT", false), ("LOGS", true)]);

    let (code, _) = call(&app, "DELETE", "/api/v1/files/CONFIG.TXT", vec![]).await;
    assert_eq!(code, StatusCode::NO_CONTENT);
    let (code, _) = call(&app, "GET", "/api/v1/files/CONFIG.TXT", vec![]).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(holder(&app).await, "dut");
}

#[tokio::test]
async fn file_errors() {
    let app = router(formatted(4 << 20));
    let (code, body) = json_of(&app, "DELETE", "/api/v1/files/MISSING.TXT", Value::Null).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    assert_eq!(holder(&app).await, "dut");

    let (code, _) = call(&app, "PUT", "/api/v1/files/much_too_long_name.text", vec![1]).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    let (code, _) = call(&app, "PUT", "/api/v1/files/BIG.BIN", vec![0; 5 << 20]).await;
    assert_eq!(code, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(holder(&app).await, "dut");

    call(&app, "PUT", "/api/v1/files/A.TXT", b"a".to_vec()).await;
    let (code, _) = call(&app, "PUT", "/api/v1/files/A.TXT/B.TXT", b"b".to_vec()).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unformatted_card_is_rejected() {
    let app = router(state_with(true, 4 << 20));
    let (code, _) = call(&app, "GET", "/api/v1/files", vec![]).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(holder(&app).await, "dut");
}

#[tokio::test]
async fn raw_blocks() {
    let app = router(state_with(true, 4 << 20));
    let data: Vec<u8> = (0..1024u32).map(|i| (i * 7 % 251) as u8).collect();
    let (code, _) = call(&app, "PUT", "/api/v1/blocks/100", data.clone()).await;
    assert_eq!(code, StatusCode::NO_CONTENT);
    let (code, body) = call(&app, "GET", "/api/v1/blocks/100?count=2", vec![]).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, data);
    let (_, body) = call(&app, "GET", "/api/v1/blocks/101", vec![]).await;
    assert_eq!(body, data[512..]);

    let (code, _) = call(&app, "PUT", "/api/v1/blocks/0", vec![0; 100]).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = call(&app, "GET", "/api/v1/blocks/0?count=0", vec![]).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = call(&app, "GET", "/api/v1/blocks/8192", vec![]).await;
    assert_eq!(code, StatusCode::RANGE_NOT_SATISFIABLE);
    assert_eq!(holder(&app).await, "dut");
}

#[tokio::test]
async fn fault_scheduling() {
    let app = router(state_with(true, 4 << 20));
    let req = json!({"kind": {"type": "delay", "added_us": 10, "window_us": 1000}});
    let (code, spec) = json_of(&app, "POST", "/api/v1/faults", req).await;
    assert_eq!(code, StatusCode::CREATED);
    let id = spec["id"].as_u64().unwrap();
    assert_eq!(spec["trigger"], "immediate");

    let (_, list) = json_of(&app, "GET", "/api/v1/faults", Value::Null).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    let (code, body) = json_of(&app, "DELETE", &format!("/api/v1/faults/{id}"), Value::Null).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["id"], id);
    let (code, _) = json_of(&app, "DELETE", "/api/v1/faults/999", Value::Null).await;
    assert_eq!(code, StatusCode::NOT_FOUND);

    let bad = json!({"kind": {"type": "corrupt", "direction": "read", "bit_flip_rate": 2.0, "window_us": 10}});
    let (code, _) = json_of(&app, "POST", "/api/v1/faults", bad).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let line = json!({
        "kind": {"type": "line_disconnect", "port": "rag", "line": "clk", "duration_us": 100},
        "trigger": {"at_transaction_count": 5}
    });
    let (code, spec) = json_of(&app, "POST", "/api/v1/faults", line).await;
    assert_eq!(code, StatusCode::CREATED, "{spec}");
    assert_eq!(spec["status"], "armed");

    let off = router(state_with(false, 4 << 20));
    let req = json!({"kind": {"type": "delay", "added_us": 10, "window_us": 1000}});
    let (code, _) = json_of(&off, "POST", "/api/v1/faults", req).await;
    assert_eq!(code, StatusCode::CONFLICT);
}

#[tokio::test]
async fn manual_switch_and_power_cycle() {
    let state = state_with(true, 4 << 20);
    let app = router(Arc::clone(&state));
    let (code, g) = json_of(&app, "POST", "/api/v1/switch", json!({"port": "rag"})).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(g["holder"], "rag");
    let (_, g) = json_of(&app, "POST", "/api/v1/switch", json!({"port": "dut"})).await;
    assert_eq!(g["holder"], "dut");
    let (code, _) = json_of(&app, "POST", "/api/v1/switch", json!({"port": "p7"})).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    let before = json_of(&app, "GET", "/api/v1/status", Value::Null).await.1["power_cycles"]
        .as_u64()
        .unwrap();
    let (code, body) = json_of(&app, "POST", "/api/v1/power/cycle", Value::Null).await;
    assert_eq!(code, StatusCode::OK);
    assert!(body["power_cycles"].as_u64().unwrap() > before);

    let st = Arc::clone(&state);
    let session = tokio::task::spawn_blocking(move || st.rag_session("holder").unwrap())
        .await
        .unwrap();
    let (code, _) = json_of(&app, "POST", "/api/v1/switch", json!({"port": "dut"})).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (_, s) = json_of(&app, "GET", "/api/v1/status", Value::Null).await;
    assert_eq!(s["lease_owner"], "holder");
    drop(session);
    assert_eq!(state.arbiter.lock().current_grant().holder, Some(PortId::DUT));
}
