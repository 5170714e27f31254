mod common;

use std::time::Duration;

use alfd_core::renyi::renyi2_entropy;
use alfd_teach::session::{DemoAccepted, HistoryView, QueryResponse};
use alfd_teach::{replay_log, router, AppState, ServiceOptions, SessionView, Status};
use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{crossing_polyline, fast_config, path_to_goal};

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value, Option<String>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let retry = resp.headers().get(header::RETRY_AFTER).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value, retry)
}

fn app_with(log_dir: Option<std::path::PathBuf>) -> Router {
    router(AppState::new(ServiceOptions { log_dir, config: fast_config() }))
}

async fn view(app: &Router, id: &str) -> SessionView {
    let (s, v, _) = call(app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

async fn wait_idle(app: &Router, id: &str) -> SessionView {
    for _ in 0..600 {
        let v = view(app, id).await;
        if v.status != Status::Fitting {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("session {id} never left fitting");
}

async fn create(app: &Router) -> SessionView {
    let (s, v, _) = call(app, Method::POST, "/sessions", Some(json!({"schema_version": 1}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn creation_returns_distinct_idle_sessions_with_initial_demos() {
    let app = app_with(None);
    let a = create(&app).await;
    let b = create(&app).await;
    assert_ne!(a.id, b.id);
    assert_eq!(a.schema_version, 1);
    assert_eq!(a.status, Status::Idle);
    assert_eq!(view(&app, &a.id).await.demos, 8);
}

#[tokio::test]
async fn invalid_fixture_and_unknown_session_are_client_errors() {
    let app = app_with(None);
    let mut world = serde_json::to_value(alfd_core::sim::World2D::toy()).unwrap();
    world["goal"] = json!([6.5, 6.75]);
    let (s, v, _) = call(&app, Method::POST, "/sessions", Some(json!({"world": world}))).await;
    assert!(s.is_client_error(), "{s} {v}");
    let (s, v, _) = call(&app, Method::POST, "/sessions", Some(json!({"schema_version": 7}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["error"], "invalid");
    let (s, _, _) = call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn teaching_round_trip_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(Some(dir.path().to_path_buf()));
    let id = create(&app).await.id;
    let before = view(&app, &id).await;

    let (s, v, _) = call(&app, Method::POST, &format!("/sessions/{id}/query"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let q: QueryResponse = serde_json::from_value(v).unwrap();
    assert!(!before.world.collides(q.query));
    assert!((renyi2_entropy(q.q.gmm()).unwrap() - q.h2_q).abs() < 1e-12 * q.h2_q.abs().max(1.0));

    let pending = view(&app, &id).await;
    assert_eq!(pending.status, Status::AwaitingDemo);
    let (s, v, _) = call(&app, Method::POST, &format!("/sessions/{id}/query"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    let (s, _, _) =
        call(&app, Method::POST, &format!("/sessions/{id}/demo"), Some(json!({"polyline": crossing_polyline()}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(view(&app, &id).await.state_hash, pending.state_hash);

    for uri in ["grid?mode=cost&resolution=6", "grid?mode=epistemic", "rollouts?n=1&mode=mean", "history", "events"] {
        let (s, v, _) = call(&app, Method::GET, &format!("/sessions/{id}/{uri}"), None).await;
        assert_eq!(s, StatusCode::OK, "{uri}: {v}");
        assert_eq!(v["schema_version"], 1);
    }
    assert_eq!(view(&app, &id).await.state_hash, pending.state_hash);

    let body = json!({"schema_version": 1, "polyline": path_to_goal(q.query)});
    let (s, v, _) = call(&app, Method::POST, &format!("/sessions/{id}/demo"), Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let accepted: DemoAccepted = serde_json::from_value(v).unwrap();
    assert_eq!(accepted.status, Status::Fitting);

    let after = wait_idle(&app, &id).await;
    assert_eq!(after.status, Status::Idle);
    assert_eq!(after.dataset_size, before.dataset_size + accepted.resampled_states);
    let (_, v, _) = call(&app, Method::GET, &format!("/sessions/{id}/history"), None).await;
    let history: HistoryView = serde_json::from_value(v).unwrap();
    assert_eq!(history.rows.len(), 2);
    assert_eq!(history.rows[1].h2_q, after.h2_q);

    let replayed = replay_log(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(replayed.state_hash(), after.state_hash);
}

#[tokio::test]
async fn busy_sessions_answer_with_retry_after() {
    let resp = axum::response::IntoResponse::into_response(alfd_teach::ServiceError::Busy);
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(resp.headers().get(header::RETRY_AFTER).unwrap(), "1");
}

#[tokio::test]
async fn demo_straight_after_acceptance_is_busy_or_conflicts() {
    let app = app_with(None);
    let id = create(&app).await.id;
    let (_, v, _) = call(&app, Method::POST, &format!("/sessions/{id}/query"), None).await;
    let q: QueryResponse = serde_json::from_value(v).unwrap();
    let body = json!({"polyline": path_to_goal(q.query)});
    let (s, _, _) = call(&app, Method::POST, &format!("/sessions/{id}/demo"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, _, retry) = call(&app, Method::POST, &format!("/sessions/{id}/demo"), Some(body)).await;
    match s {
        StatusCode::SERVICE_UNAVAILABLE => assert_eq!(retry.as_deref(), Some("1")),
        // The refit already landed: the session is idle again.
        other => assert_eq!(other, StatusCode::CONFLICT),
    }
    wait_idle(&app, &id).await;
}
