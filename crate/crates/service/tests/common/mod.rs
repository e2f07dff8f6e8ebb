#![allow(dead_code)]

use std::sync::Arc;

use archplate_service::server::{router, AppState};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn app() -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::new(None));
    (state.clone(), router(state))
}

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, String) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = call_raw(app, method, uri, body.map(|b| b.to_string())).await;
    let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
    (status, value)
}

pub fn neo_hookean() -> Value {
    json!({"model": "neo_hookean", "mu": 1.0, "lambda": 10.0})
}

pub fn visco() -> Value {
    json!({"model": "visco", "G_eq": 200.0, "lambda_L": 10.0, "kappa": 4000.0, "rho0": 1.3e-5,
           "branches": [{"G": 300.0, "tau": 0.001}, {"G": 600.0, "tau": 0.2}, {"G": 150.0, "tau": 3.0}]})
}

pub fn block(dims: [usize; 3], material: Value) -> Value {
    json!({"geometry": {"kind": "block", "extent": [10.0, 10.0, 2.0], "dims": dims}, "material": material})
}

pub async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, Method::POST, "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

pub async fn step(app: &Router, id: &str, action: [f64; 4]) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/step"), Some(json!({ "action": action }))).await
}
