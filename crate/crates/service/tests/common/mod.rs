#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dxloop_core::backbone::BackboneModel;
use dxloop_core::indicators::IndicatorTable;
use dxloop_core::policy::{DecisionThresholds, EngineModel, PolicyConfig, PolicyEngine};
use dxloop_core::seed;
use dxloop_service::api::{router, ApiState};
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::Value;
use tower::ServiceExt;

pub const WIDTH: usize = 6;

/// A backbone with every parameter drawn at random, so sessions end in all
/// three ways. No open-set calibration: probabilities are the softmax.
pub fn random_engine(seed_value: u64) -> PolicyEngine<EngineModel> {
    let mut rng = seed::rng(seed_value);
    let mut model = BackboneModel::zeros(WIDTH, 8);
    for p in model.params_mut() {
        *p = rng.gen_range(-1.0..1.0);
    }
    let engine_model = EngineModel {
        main: model,
        first_visit: None,
        openmax: None,
        table: IndicatorTable::default(),
    };
    let config = PolicyConfig {
        thresholds: DecisionThresholds::with_deltas(0.75, 0.75, 0.8),
        ..PolicyConfig::default()
    };
    PolicyEngine::new(engine_model, config).expect("valid config")
}

pub fn app_for(engine: PolicyEngine<EngineModel>) -> (Router, Arc<ApiState<EngineModel>>) {
    let state = Arc::new(ApiState::new(engine, IndicatorTable::default(), WIDTH));
    (router(state.clone()), state)
}

pub fn random_block<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..WIDTH).map(|_| rng.gen_range(0.0..1.0)).collect()
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .expect("request");
    let response = app.clone().oneshot(request).await.expect("router is infallible");
    let status = response.status();
    let bytes = response.into_body().collect().await.expect("body").to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).expect("JSON body") };
    (status, value)
}

pub async fn post(app: &Router, uri: &str, body: &Value) -> (StatusCode, Value) {
    send(app, Method::POST, uri, Some(body.to_string())).await
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    send(app, Method::GET, uri, None).await
}
