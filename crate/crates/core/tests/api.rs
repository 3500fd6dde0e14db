mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use chrono::Utc;
use common::*;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use taskgen::api::{router, AppState, StudentTaskView};
use taskgen::domain::{GenerationRequest, GenerationTrace, StudentTaskRating, Task, TaskStatus};
use taskgen::gateway::ScriptEntry;
use taskgen::sandbox::SandboxLimits;
use taskgen::store::Store;

struct Fixture {
    _dir: tempfile::TempDir,
    state: Arc<AppState>,
    app: Router,
}

fn fixture(script: Vec<ScriptEntry>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState {
        pipeline: scripted_pipeline(script),
        store: Store::open(dir.path().join("store")).unwrap(),
        teaching_language: "English".into(),
        limits: SandboxLimits { wall_timeout_ms: 2_000, ..SandboxLimits::default() },
    });
    Fixture { _dir: dir, app: router(state.clone()), state }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_raw(app, method, uri, body.map(|b| b.to_string()), None).await.0
}

async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<String>,
    cookie: Option<&str>,
) -> ((StatusCode, Value), Option<String>) {
    use tower::ServiceExt;
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    if let Some(c) = cookie {
        req = req.header(header::COOKIE, c);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body.unwrap_or_default())).unwrap()).await.unwrap();
    let status = resp.status();
    let set_cookie = resp.headers().get(header::SET_COOKIE).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    ((status, value), set_cookie)
}

async fn create(app: &Router) -> StudentTaskView {
    let (status, body) =
        call(app, "POST", "/api/tasks", Some(json!({"concepts": ["recursion"], "context": "music"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    serde_json::from_value(body).unwrap()
}

#[tokio::test]
async fn generate_and_fetch_without_hidden_fields() {
    if !python_available() {
        return;
    }
    let f = fixture(task_script(&[FIXED]));
    let view = create(&f.app).await;
    assert!(view.description.to_lowercase().contains("music"));
    let (status, body) = call(&f.app, "GET", &format!("/api/tasks/{}", view.id), None).await;
    assert_eq!(status, StatusCode::OK);
    let keys: Vec<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["code_skeleton", "created_at", "description", "id"]);
    let stored = f.state.store.get_task(&view.id).unwrap();
    assert_eq!(stored.status, TaskStatus::Functional);
}

#[tokio::test]
async fn empty_request_still_generates() {
    if !python_available() {
        return;
    }
    let f = fixture(task_script(&[FIXED]));
    let (status, _) = call(&f.app, "POST", "/api/tasks", Some(json!({"concepts": [], "context": ""}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = call(&f.app, "POST", "/api/tasks", Some(json!({}))).await;
    // The script held one task only, so the second call finds the provider exhausted.
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn generation_failure_modes() {
    if !python_available() {
        return;
    }
    let f = fixture(task_script(&[BROKEN; 5]));
    let (status, body) =
        call(&f.app, "POST", "/api/tasks", Some(json!({"concepts": ["lists"], "context": "pets"}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error_code"], "generation_unsuccessful");
    assert_eq!(body["retryable"], true);

    let (status, body) = call_raw(&f.app, "POST", "/api/tasks", Some("{not json".into()), None).await.0;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error_code"], "malformed_body");
    let (status, _) = call(&f.app, "POST", "/api/tasks", Some(json!({"concepts": "recursion"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn submissions_are_graded() {
    if !python_available() {
        return;
    }
    let f = fixture(task_script(&[FIXED]));
    let view = create(&f.app).await;
    let uri = format!("/api/tasks/{}/submissions", view.id);
    let model = f.state.store.get_task(&view.id).unwrap().model_solution;

    let (status, body) = call(&f.app, "POST", &uri, Some(json!({"code": model}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["solved"], true);
    assert_eq!(body["tests"].as_array().unwrap().len(), 2);

    let (_, body) = call(&f.app, "POST", &uri, Some(json!({"code": "def add(a, b):\n    return 0\n"}))).await;
    assert_eq!(body["solved"], false);
    assert_eq!(body["tests"][0]["passed"], false);

    let (_, body) =
        call(&f.app, "POST", &uri, Some(json!({"code": "def add(a, b):\n    while True:\n        pass\n"}))).await;
    assert_eq!((body["timed_out"].clone(), body["solved"].clone()), (json!(true), json!(false)));

    let (_, body) = call(&f.app, "POST", &uri, Some(json!({"code": "def add(a, b)\n"}))).await;
    assert_eq!(body["compile_ok"], false);
    assert!(body["diagnostics"].as_str().unwrap().contains("SyntaxError"));

    let (status, _) = call(&f.app, "POST", &uri, Some(json!({"code": "   "}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&f.app, "POST", "/api/tasks/missing/submissions", Some(json!({"code": "x = 1"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

fn store_task(store: &Store, id: &str, status: TaskStatus) {
    let task = Task {
        id: id.into(),
        request: GenerationRequest::new(["Lists"], "Pets", "English"),
        description: "d".into(),
        code_skeleton: String::new(),
        unit_tests: String::new(),
        model_solution: String::new(),
        status,
        iterations_used: 0,
        created_at: Utc::now(),
    };
    store.put_task(&task, &GenerationTrace::new(id)).unwrap();
}

#[tokio::test]
async fn non_functional_tasks_cannot_be_attempted() {
    let f = fixture(task_script(&[FIXED]));
    store_task(&f.state.store, "nf", TaskStatus::GenerationFailed);
    let (status, body) = call(&f.app, "POST", "/api/tasks/nf/submissions", Some(json!({"code": "x = 1"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error_code"], "task_not_functional");
}

#[tokio::test]
async fn ratings_and_sessions() {
    let f = fixture(task_script(&[FIXED]));
    store_task(&f.state.store, "t", TaskStatus::GenerationFailed);
    let body = json!({"a1": 5, "a2": 4, "a3": true}).to_string();
    let ((status, _), cookie) = call_raw(&f.app, "POST", "/api/tasks/t/ratings", Some(body), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let cookie = cookie.expect("new session gets a cookie");
    let session = cookie.split(';').next().unwrap().to_string();

    // Same session rerates: last write wins.
    let body = json!({"a1": 2, "a2": 2, "a3": false}).to_string();
    let ((status, _), again) = call_raw(&f.app, "POST", "/api/tasks/t/ratings", Some(body), Some(&session)).await;
    assert_eq!((status, again), (StatusCode::NO_CONTENT, None));
    let ratings: Vec<StudentTaskRating> = f.state.store.list(taskgen::store::Kind::StudentRatings).unwrap();
    assert_eq!(ratings.len(), 1);
    assert_eq!(ratings[0].a1_context, 2);

    let (status, body) =
        call(&f.app, "POST", "/api/tasks/t/ratings", Some(json!({"a1": 6, "a2": 4, "a3": true}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error_code"], "out_of_range");
    let (status, _) =
        call(&f.app, "POST", "/api/tasks/nope/ratings", Some(json!({"a1": 5, "a2": 4, "a3": true}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn survey_and_stats() {
    let f = fixture(task_script(&[FIXED]));
    let (status, body) = call(&f.app, "GET", "/api/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["b4"]["mean"], "n/a");
    assert_eq!(body["completion_rate"]["rate"]["percent"], "n/a");
    assert_eq!(body["rubrics"], Value::Null);

    for b4 in [5, 4] {
        let (status, _) = call(&f.app, "POST", "/api/survey", Some(json!({"b1": 3, "b2": 3, "b3": 3, "b4": b4}))).await;
        assert_eq!(status, StatusCode::NO_CONTENT);
    }
    let (_, body) = call(&f.app, "GET", "/api/stats", None).await;
    assert_eq!(body["b4"]["mean"], "4.50");
    assert_eq!(body["b4"]["n"], 2);
    let (status, _) = call(&f.app, "POST", "/api/survey", Some(json!({"b1": 0, "b2": 3, "b3": 3, "b4": 3}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}
