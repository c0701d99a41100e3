//! The API must expose exactly the state the engine reaches on the same
//! inputs and events, including after rejected events.

mod common;

use std::collections::BTreeMap;

use axum::http::StatusCode;
use common::{app_for, post, random_block, random_engine, WIDTH};
use dxloop_core::domain::{CategorySet, ExamCategory, Label, VisitRecord};
use dxloop_core::indicators::{encode_indicator_block, IndicatorTable};
use dxloop_core::policy::{Action, InstitutionCapability, SessionEvent, SessionStart};
use dxloop_core::seed;
use dxloop_service::api::SessionView;
use rand::Rng;
use serde_json::{json, Value};

fn random_capability<R: Rng>(rng: &mut R) -> CategorySet {
    let mut set = CategorySet::empty().with(ExamCategory::Base);
    for c in ExamCategory::exams() {
        if rng.gen_bool(0.7) {
            set.insert(c);
        }
    }
    set
}

fn random_history<R: Rng>(rng: &mut R, visit_index: u32) -> Vec<VisitRecord> {
    (0..visit_index)
        .map(|v| {
            let mut blocks = BTreeMap::new();
            for c in ExamCategory::ALL {
                if c == ExamCategory::Base || rng.gen_bool(0.5) {
                    blocks.insert(c, random_block(rng));
                }
            }
            VisitRecord {
                subject_id: "p1".into(),
                visit_index: v,
                label: Label::Unlabeled,
                blocks,
                indicators: [("MMSE".to_string(), rng.gen_range(15.0..30.0))].into_iter().collect(),
            }
        })
        .collect()
}

/// Indicator values of `category` drawn inside each range's envelope.
fn random_indicators<R: Rng>(rng: &mut R, table: &IndicatorTable, category: ExamCategory) -> BTreeMap<String, f64> {
    table
        .for_category(category)
        .map(|r| {
            let (lo, hi) = r.envelope();
            (r.name.clone(), if hi > lo { rng.gen_range(lo..hi) } else { lo })
        })
        .collect()
}

#[tokio::test]
async fn api_replays_engine_sessions() {
    let table = IndicatorTable::default();
    let (app, api_state) = app_for(random_engine(21));
    let engine = api_state.engine();
    let mut rng = seed::rng(22);
    let mut outcomes = BTreeMap::new();
    for _ in 0..60 {
        let visit_index = rng.gen_range(0..3);
        let capability = random_capability(&mut rng);
        let history = random_history(&mut rng, visit_index);
        let base_block = random_block(&mut rng);
        let request = json!({
            "subject_id": "p1",
            "visit_index": visit_index,
            "history": history,
            "base_block": base_block,
            "capability": capability,
        });
        let (status, body) = post(&app, "/v1/sessions", &request).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        let id = body["session_id"].as_str().unwrap().to_string();
        let start = SessionStart {
            subject_id: Some("p1".into()),
            visit_index,
            history,
            base_block,
            indicators: BTreeMap::new(),
            capability: InstitutionCapability::new(capability).unwrap(),
        };
        let (mut state, _) = engine.start_session(id.clone(), start).unwrap();
        let mut api_view: SessionView = serde_json::from_value(body).unwrap();
        assert_eq!(api_view, SessionView::of(&state));

        let events_uri = format!("/v1/sessions/{id}/events");
        while let Action::RequestExam { category, .. } = api_view.action.clone() {
            // An event for the wrong category is rejected by both sides.
            if rng.gen_bool(0.2) {
                let other = ExamCategory::exams().find(|c| *c != category).unwrap();
                let (status, _) = post(&app, &events_uri, &json!({"type": "exam_unavailable", "category": other})).await;
                assert_eq!(status, StatusCode::CONFLICT);
                assert!(engine
                    .step(&mut state, SessionEvent::ExamUnavailable { category: other })
                    .is_err());
            }
            let (payload, event) = match rng.gen_range(0..3) {
                0 => (
                    json!({"type": "exam_unavailable", "category": category}),
                    SessionEvent::ExamUnavailable { category },
                ),
                1 => {
                    let block = random_block(&mut rng);
                    (
                        json!({"type": "exam_result", "category": category, "block": block}),
                        SessionEvent::ExamResult {
                            category,
                            block,
                            indicators: BTreeMap::new(),
                        },
                    )
                }
                _ => {
                    let indicators = random_indicators(&mut rng, &table, category);
                    let block = if indicators.is_empty() {
                        random_block(&mut rng)
                    } else {
                        encode_indicator_block(category, &indicators, &table, WIDTH)
                    };
                    let payload = if indicators.is_empty() {
                        json!({"type": "exam_result", "category": category, "block": block})
                    } else {
                        json!({"type": "exam_result", "category": category, "indicators": indicators})
                    };
                    (payload, SessionEvent::ExamResult { category, block, indicators })
                }
            };
            let (status, body) = post(&app, &events_uri, &payload).await;
            assert_eq!(status, StatusCode::OK, "{body}");
            engine.step(&mut state, event).unwrap();
            api_view = serde_json::from_value(body).unwrap();
            assert_eq!(api_view, SessionView::of(&state));
        }
        let (status, body) = common::get(&app, &format!("/v1/sessions/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(serde_json::from_value::<SessionView>(body).unwrap(), SessionView::of(&state));
        *outcomes.entry(action_kind(&api_view.action)).or_insert(0) += 1;
    }
    // The random model should exercise more than one way of ending.
    assert!(outcomes.len() >= 2, "{outcomes:?}");
}

fn action_kind(action: &Action) -> String {
    let value: Value = serde_json::to_value(action).unwrap();
    value["kind"].as_str().unwrap().to_string()
}
