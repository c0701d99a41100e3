mod common;

use std::io::Write;
use std::sync::{Arc, Mutex};

use axum::http::{Method, StatusCode};
use common::{app_for, get, post, random_block, random_engine, send, WIDTH};
use dxloop_core::domain::{CategorySet, ExamCategory, NUM_EXAM_HEADS};
use dxloop_core::error::PolicyError;
use dxloop_core::indicators::IndicatorTable;
use dxloop_core::policy::{DiagnosisModel, OutcomeProbs, PolicyConfig, PolicyEngine, Prediction, SessionInput};
use dxloop_core::seed;
use dxloop_service::api::{router, ApiState};
use serde_json::{json, Value};

/// Fixed probabilities per number of acquired categories; exam heads all
/// fire with Cog strongest.
struct Scripted(Vec<[f64; 3]>);

impl DiagnosisModel for Scripted {
    fn predict(&self, input: &SessionInput<'_>) -> Result<Prediction, PolicyError> {
        let step = (input.acquired.len() - 1).min(self.0.len() - 1);
        let mut exam_scores = [0.6; NUM_EXAM_HEADS];
        exam_scores[0] = 0.9;
        Ok(Prediction {
            probs: OutcomeProbs::from_array(self.0[step]),
            exam_scores,
            openmax: None,
        })
    }
}

fn scripted_app(probs: Vec<[f64; 3]>) -> axum::Router {
    let engine = PolicyEngine::new(Scripted(probs), PolicyConfig::default()).unwrap();
    router(Arc::new(ApiState::new(engine, IndicatorTable::default(), WIDTH)))
}

fn base_payload() -> Value {
    json!({"base_block": vec![0.5; WIDTH], "indicators": {"Psychiatric": 0.0}})
}

fn events_uri(id: &Value) -> String {
    format!("/v1/sessions/{}/events", id.as_str().unwrap())
}

#[tokio::test]
async fn start_returns_created_with_first_action() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (status, body) = post(&app, "/v1/sessions", &base_payload()).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(body["session_id"].is_string());
    assert_eq!(body["action"]["kind"], "request_exam");
    assert_eq!(body["action"]["category"], "Cog");
    assert_eq!(body["status"]["state"], "awaiting_exam");
    let trail = body["trail"].as_array().unwrap();
    assert_eq!(trail.len(), 1);
    let p = &trail[0]["probabilities"];
    assert_eq!((p["unknown"].as_f64(), p["ad"].as_f64(), p["cn"].as_f64()), (Some(0.2), Some(0.4), Some(0.4)));
}

#[tokio::test]
async fn diagnosis_carries_label_and_probabilities() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4], [0.01, 0.97, 0.02]]);
    let (_, started) = post(&app, "/v1/sessions", &base_payload()).await;
    let event = json!({"type": "exam_result", "category": "Cog", "block": vec![0.1; WIDTH]});
    let (status, body) = post(&app, &events_uri(&started["session_id"]), &event).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["action"]["kind"], "diagnosis");
    assert_eq!(body["action"]["label"], "AD");
    assert_eq!(body["action"]["probabilities"]["ad"].as_f64(), Some(0.97));
    assert_eq!(body["trail"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn event_for_closed_session_is_conflict() {
    let app = scripted_app(vec![[0.01, 0.98, 0.01]]);
    let (status, started) = post(&app, "/v1/sessions", &base_payload()).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(started["action"]["kind"], "diagnosis");
    let event = json!({"type": "exam_unavailable", "category": "Cog"});
    let (status, body) = post(&app, &events_uri(&started["session_id"]), &event).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "session_closed");
}

#[tokio::test]
async fn referral_when_unknown_dominates() {
    let app = scripted_app(vec![[0.9, 0.05, 0.05]]);
    let (_, body) = post(&app, "/v1/sessions", &base_payload()).await;
    assert_eq!(body["action"]["kind"], "refer_unknown");
    assert_eq!(body["action"]["probabilities"]["unknown"].as_f64(), Some(0.9));
    assert!(body["action"].get("category").is_none());
}

#[tokio::test]
async fn malformed_json_is_bad_request() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (status, body) = send(&app, Method::POST, "/v1/sessions", Some("{\"base_block\": [".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "malformed_json");
    assert!(!body["error"]["message"].as_str().unwrap().is_empty());

    let (_, started) = post(&app, "/v1/sessions", &base_payload()).await;
    let (status, body) = send(&app, Method::POST, &events_uri(&started["session_id"]), Some("not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "malformed_json");
}

#[tokio::test]
async fn invalid_payloads_are_bad_request() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let cases = [
        json!({"base_block": vec![0.5; WIDTH + 1]}),
        json!({"base_block": vec![0.5; WIDTH], "capability": ["Cog", "MRI"]}),
        json!({"base_block": vec![0.5; WIDTH], "capability": ["Base", "Xray"]}),
        json!({"base_block": vec![0.5; WIDTH], "indicators": {"MMSE": 20.0}}),
        json!({"indicators": {"NoSuchScore": 1.0}}),
        json!({}),
        json!({"base_block": vec![0.5; WIDTH], "colour": "blue"}),
    ];
    for case in cases {
        let (status, body) = post(&app, "/v1/sessions", &case).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{case}");
        assert!(body["error"]["code"].is_string());
    }
}

#[tokio::test]
async fn base_block_can_come_from_indicators() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (status, body) = post(&app, "/v1/sessions", &json!({"indicators": {"Psychiatric": 1.0}})).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
}

#[tokio::test]
async fn capability_without_base_is_rejected() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (status, body) = post(&app, "/v1/sessions", &json!({"base_block": vec![0.5; WIDTH], "capability": ["Cog"]})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_capability");
}

#[tokio::test]
async fn unknown_session_and_route_are_not_found() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (status, body) = get(&app, "/v1/sessions/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");
    let event = json!({"type": "exam_unavailable", "category": "Cog"});
    let (status, _) = post(&app, "/v1/sessions/nope/events", &event).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/v2/sessions").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rejected_events_leave_the_session_unchanged() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (_, started) = post(&app, "/v1/sessions", &base_payload()).await;
    let uri = events_uri(&started["session_id"]);
    let session_uri = format!("/v1/sessions/{}", started["session_id"].as_str().unwrap());
    let (_, before) = get(&app, &session_uri).await;
    assert_eq!(before, started);

    let wrong_category = json!({"type": "exam_result", "category": "MRI", "block": vec![0.1; WIDTH]});
    let (status, body) = post(&app, &uri, &wrong_category).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["code"], "protocol");

    let wrong_width = json!({"type": "exam_result", "category": "Cog", "block": vec![0.1; WIDTH - 1]});
    let (status, _) = post(&app, &uri, &wrong_width).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let no_data = json!({"type": "exam_result", "category": "Cog"});
    let (status, _) = post(&app, &uri, &no_data).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let foreign_indicator = json!({"type": "exam_result", "category": "Cog", "indicators": {"Psychiatric": 1.0}});
    let (status, _) = post(&app, &uri, &foreign_indicator).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let bad_type = json!({"type": "exam_maybe", "category": "Cog"});
    let (status, body) = post(&app, &uri, &bad_type).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "invalid_payload");

    let (_, after) = get(&app, &session_uri).await;
    assert_eq!(after, before);
}

#[tokio::test]
async fn unavailable_exam_moves_to_the_next_request() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (_, started) = post(&app, "/v1/sessions", &base_payload()).await;
    let event = json!({"type": "exam_unavailable", "category": "Cog"});
    let (status, body) = post(&app, &events_uri(&started["session_id"]), &event).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["action"]["kind"], "request_exam");
    assert_ne!(body["action"]["category"], "Cog");
    assert_eq!(body["refused"], json!(["Cog"]));
}

#[tokio::test]
async fn sessions_do_not_affect_each_other() {
    let (app, _) = app_for(random_engine(3));
    let mut rng = seed::rng(4);
    let (_, a) = post(&app, "/v1/sessions", &json!({"base_block": random_block(&mut rng)})).await;
    let (_, b) = post(&app, "/v1/sessions", &json!({"base_block": random_block(&mut rng)})).await;
    assert_ne!(a["session_id"], b["session_id"]);
    let b_uri = format!("/v1/sessions/{}", b["session_id"].as_str().unwrap());
    let (_, b_before) = get(&app, &b_uri).await;
    let mut current = a;
    while current["action"]["kind"] == "request_exam" {
        let event = json!({
            "type": "exam_result",
            "category": current["action"]["category"],
            "block": random_block(&mut rng),
        });
        let (status, next) = post(&app, &events_uri(&current["session_id"]), &event).await;
        assert_eq!(status, StatusCode::OK);
        current = next;
    }
    let (_, b_after) = get(&app, &b_uri).await;
    assert_eq!(b_before, b_after);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_events_on_one_session_apply_once() {
    let app = scripted_app(vec![[0.2, 0.4, 0.4]]);
    let (_, started) = post(&app, "/v1/sessions", &base_payload()).await;
    let uri = events_uri(&started["session_id"]);
    let event = json!({"type": "exam_result", "category": "Cog", "block": vec![0.1; WIDTH]});
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let (app, uri, event) = (app.clone(), uri.clone(), event.clone());
            tokio::spawn(async move { post(&app, &uri, &event).await.0 })
        })
        .collect();
    let mut statuses = Vec::new();
    for t in tasks {
        statuses.push(t.await.unwrap());
    }
    assert_eq!(statuses.iter().filter(|s| **s == StatusCode::OK).count(), 1);
    assert!(statuses.iter().all(|s| *s == StatusCode::OK || *s == StatusCode::CONFLICT));
    let (_, view) = get(&app, &format!("/v1/sessions/{}", started["session_id"].as_str().unwrap())).await;
    assert_eq!(view["trail"].as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn many_sessions_run_concurrently() {
    let (app, _) = app_for(random_engine(5));
    let tasks: Vec<_> = (0..16u64)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move {
                let mut rng = seed::rng(100 + i);
                let (status, mut view) = post(&app, "/v1/sessions", &json!({"base_block": random_block(&mut rng)})).await;
                assert_eq!(status, StatusCode::CREATED);
                let mut steps = 1;
                while view["action"]["kind"] == "request_exam" {
                    let event = json!({
                        "type": "exam_result",
                        "category": view["action"]["category"],
                        "block": random_block(&mut rng),
                    });
                    let (status, next) = post(&app, &events_uri(&view["session_id"]), &event).await;
                    assert_eq!(status, StatusCode::OK);
                    view = next;
                    steps += 1;
                }
                assert_eq!(view["trail"].as_array().unwrap().len(), steps);
                view["session_id"].as_str().unwrap().to_string()
            })
        })
        .collect();
    let mut ids = Vec::new();
    for t in tasks {
        ids.push(t.await.unwrap());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 16);
}

#[derive(Clone, Default)]
struct SharedBuffer(Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[tokio::test]
async fn audit_log_records_accepted_requests_only() {
    let buffer = SharedBuffer::default();
    let engine = PolicyEngine::new(Scripted(vec![[0.2, 0.4, 0.4]]), PolicyConfig::default()).unwrap();
    let state = ApiState::new(engine, IndicatorTable::default(), WIDTH).with_audit(Box::new(buffer.clone()));
    let app = router(Arc::new(state));
    let (_, started) = post(&app, "/v1/sessions", &base_payload()).await;
    let uri = events_uri(&started["session_id"]);
    post(&app, &uri, &json!({"type": "exam_unavailable", "category": "MRI"})).await;
    post(&app, &uri, &json!({"type": "exam_unavailable", "category": "Cog"})).await;
    let text = String::from_utf8(buffer.0.lock().unwrap().clone()).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["event"], "start");
    assert_eq!(lines[1]["event"]["type"], "exam_unavailable");
    assert!(lines.iter().all(|l| l["session_id"] == started["session_id"]));
}

#[test]
fn capability_serializes_as_names() {
    let set = CategorySet::empty().with(ExamCategory::Base).with(ExamCategory::MRI);
    assert_eq!(serde_json::to_value(set).unwrap(), json!(["Base", "MRI"]));
}
