//! HTTP API for the student workbench.
//!
//! Student-facing responses never carry the model solution, the unit-test
//! source or the iteration count. Submission feedback is additionally
//! scrubbed of any line of those sources, since code under test can try
//! to echo them.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::assessment::{
    completion_rate, likert_summary, summarize_rubrics, CompletionRate, LikertSummary, Ratio, RubricSummary,
};
use crate::domain::{
    normalize_request, ExpertRating, GenerationRequest, GenerationTrace, StudentTaskRating, Submission, SurveyResponse,
    Task, TaskStatus, TestResult,
};
use crate::pipeline::{iteration_statistics, IterationStatistics, Pipeline, PipelineError};
use crate::sandbox::SandboxLimits;
use crate::store::{Kind, Store, StoreError, TaskFilter};

pub const SESSION_COOKIE: &str = "taskgen_session";
const MAX_CODE_BYTES: usize = 100_000;
/// Source lines shorter than this are too generic to count as a leak.
pub const MIN_HIDDEN_LINE_CHARS: usize = 12;

pub struct AppState {
    pub pipeline: Pipeline,
    pub store: Store,
    pub teaching_language: String,
    pub limits: SandboxLimits,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks", post(create_task))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/submissions", post(submit))
        .route("/api/tasks/{id}/ratings", post(rate_task))
        .route("/api/survey", post(survey))
        .route("/api/stats", get(stats))
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTaskView {
    pub id: String,
    pub description: String,
    pub code_skeleton: String,
    pub created_at: DateTime<Utc>,
}

impl From<&Task> for StudentTaskView {
    fn from(t: &Task) -> Self {
        Self {
            id: t.id.clone(),
            description: t.description.clone(),
            code_skeleton: t.code_skeleton.clone(),
            created_at: t.created_at,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        tracing::error!(%message, "request failed");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", "internal error")
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { id, .. } | StoreError::InvalidId(id) => {
                Self::new(StatusCode::NOT_FOUND, "task_not_found", format!("no task {id}"))
            }
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error_code": self.code, "message": self.message});
        if self.status == StatusCode::BAD_GATEWAY {
            body["retryable"] = json!(true);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable("malformed_body", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

/// The caller's anonymous session, and a cookie to set when it is new.
fn session(headers: &HeaderMap) -> (String, Option<HeaderValue>) {
    let existing = headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, v)| *k == SESSION_COOKIE && crate::store::valid_id(v))
        .map(|(_, v)| v.to_string());
    match existing {
        Some(id) => (id, None),
        None => {
            let id = uuid::Uuid::new_v4().simple().to_string();
            let cookie = format!("{SESSION_COOKIE}={id}; Path=/; HttpOnly; SameSite=Lax");
            (id, HeaderValue::from_str(&cookie).ok())
        }
    }
}

fn with_cookie(cookie: Option<HeaderValue>, resp: impl IntoResponse) -> Response {
    let mut resp = resp.into_response();
    if let Some(c) = cookie {
        resp.headers_mut().append(header::SET_COOKIE, c);
    }
    resp
}

#[derive(Deserialize)]
struct CreateTaskBody {
    #[serde(default)]
    concepts: Vec<String>,
    #[serde(default)]
    context: String,
}

async fn create_task(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: CreateTaskBody = parse_body(&body)?;
    let request =
        normalize_request(GenerationRequest::new(body.concepts, body.context, state.teaching_language.clone()));
    let id = uuid::Uuid::new_v4().simple().to_string();
    let st = state.clone();
    let result = blocking(move || {
        let result = st.pipeline.generate_task(&request, &id, Utc::now());
        let stored = match &result {
            Ok(g) => st.store.put_task(&g.task, &g.trace),
            Err(PipelineError::GenerationFailed { partial, .. }) => st.store.put_task(&partial.task, &partial.trace),
            Err(PipelineError::InvalidConfig(_)) => Ok(()),
        };
        (result, stored)
    })
    .await?;
    match result {
        (Ok(g), stored) => {
            stored?;
            if g.task.status == TaskStatus::Functional {
                Ok((StatusCode::CREATED, Json(StudentTaskView::from(&g.task))).into_response())
            } else {
                Err(ApiError::new(
                    StatusCode::BAD_GATEWAY,
                    "generation_unsuccessful",
                    "No working task could be generated for this request. Please try again.",
                ))
            }
        }
        (Err(PipelineError::GenerationFailed { cause, .. }), _) => {
            tracing::warn!(error = %cause, "task generation infrastructure failure");
            Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "service_unavailable",
                "Task generation is temporarily unavailable.",
            ))
        }
        (Err(e), _) => Err(ApiError::internal(e)),
    }
}

async fn get_task(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<StudentTaskView>> {
    let task = blocking(move || state.store.get_task(&id)).await??;
    Ok(Json(StudentTaskView::from(&task)))
}

#[derive(Deserialize)]
struct SubmissionBody {
    code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionView {
    pub solved: bool,
    pub compile_ok: bool,
    pub timed_out: bool,
    pub tests: Vec<TestResult>,
    /// Output printed by the submitted code.
    pub stdout: String,
    /// Loader diagnostics, present when the code could not be loaded.
    pub diagnostics: String,
}

/// Replaces every sufficiently long line of the hidden sources found in `text`.
pub fn redact(text: &str, hidden: &[&str]) -> String {
    let mut lines: Vec<&str> = hidden
        .iter()
        .flat_map(|s| s.lines())
        .map(str::trim)
        .filter(|l| l.chars().count() >= MIN_HIDDEN_LINE_CHARS)
        .collect();
    // Longest first, so a line containing a shorter one is removed whole.
    lines.sort_by_key(|l| std::cmp::Reverse(l.len()));
    lines.dedup();
    let mut out = text.to_string();
    for l in lines {
        if out.contains(l) {
            out = out.replace(l, "[hidden]");
        }
    }
    out
}

async fn submit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SubmissionView>> {
    let body: SubmissionBody = parse_body(&body)?;
    let st = state.clone();
    let task = blocking(move || st.store.get_task(&id)).await??;
    if task.status != TaskStatus::Functional {
        return Err(ApiError::new(StatusCode::CONFLICT, "task_not_functional", "this task cannot be attempted"));
    }
    if body.code.trim().is_empty() {
        return Err(ApiError::unprocessable("empty_code", "code must not be empty"));
    }
    if body.code.len() > MAX_CODE_BYTES {
        return Err(ApiError::unprocessable("code_too_large", format!("code exceeds {MAX_CODE_BYTES} bytes")));
    }
    let st = state.clone();
    let view = blocking(move || -> ApiResult<SubmissionView> {
        let outcome = st.pipeline.sandbox().run_submission(&task, &body.code, &st.limits).map_err(|e| {
            tracing::error!(error = %e, "sandbox failure");
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service_unavailable", "code execution is unavailable")
        })?;
        let submission = Submission::new(&task.id, &body.code, outcome, Utc::now());
        st.store.put_submission(&uuid::Uuid::new_v4().simple().to_string(), &submission)?;
        let hidden = [task.model_solution.as_str(), task.unit_tests.as_str()];
        let o = &submission.outcome;
        Ok(SubmissionView {
            solved: submission.solved,
            compile_ok: o.compile_ok,
            timed_out: o.timed_out,
            tests: o
                .tests
                .iter()
                .map(|t| TestResult {
                    name: redact(&t.name, &hidden),
                    passed: t.passed,
                    message: redact(&t.message, &hidden),
                })
                .collect(),
            stdout: redact(&o.stdout, &hidden),
            diagnostics: if o.compile_ok { String::new() } else { redact(&o.stderr, &hidden) },
        })
    })
    .await??;
    Ok(Json(view))
}

#[derive(Deserialize)]
struct RatingBody {
    a1: i64,
    a2: i64,
    a3: bool,
}

fn likert_value(name: &str, v: i64) -> ApiResult<u8> {
    if (1..=5).contains(&v) {
        Ok(v as u8)
    } else {
        Err(ApiError::unprocessable("out_of_range", format!("{name} must be between 1 and 5, got {v}")))
    }
}

async fn rate_task(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let body: RatingBody = parse_body(&body)?;
    let (session, cookie) = session(&headers);
    let st = state.clone();
    let task_id = id.clone();
    blocking(move || st.store.get_task(&task_id)).await??;
    let rating = StudentTaskRating {
        task_id: id,
        a1_context: likert_value("a1", body.a1)?,
        a2_sensible: likert_value("a2", body.a2)?,
        a3_solvable: body.a3,
    };
    blocking(move || state.store.put_student_rating(&session, &rating)).await??;
    Ok(with_cookie(cookie, StatusCode::NO_CONTENT))
}

#[derive(Deserialize)]
struct SurveyBody {
    b1: i64,
    b2: i64,
    b3: i64,
    b4: i64,
}

async fn survey(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let body: SurveyBody = parse_body(&body)?;
    let (session, cookie) = session(&headers);
    let response = SurveyResponse {
        respondent_id: session.clone(),
        b1: likert_value("b1", body.b1)?,
        b2: likert_value("b2", body.b2)?,
        b3: likert_value("b3", body.b3)?,
        b4: likert_value("b4", body.b4)?,
    };
    blocking(move || state.store.put_survey(&session, &response)).await??;
    Ok(with_cookie(cookie, StatusCode::NO_CONTENT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertView {
    pub n: usize,
    pub mean: String,
    pub sd: String,
    pub histogram: [u64; 5],
}

impl LikertView {
    fn of(values: &[u8]) -> Self {
        match likert_summary(values) {
            Ok(s) => Self::from(&s),
            Err(_) => Self { n: 0, mean: "n/a".into(), sd: "n/a".into(), histogram: [0; 5] },
        }
    }
}

impl From<&LikertSummary> for LikertView {
    fn from(s: &LikertSummary) -> Self {
        Self { n: s.n, mean: s.display_mean(), sd: s.display_sd(), histogram: s.histogram }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YesNoView {
    pub yes: u64,
    pub no: u64,
    pub yes_rate: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsView {
    pub a1: LikertView,
    pub a2: LikertView,
    pub a3: YesNoView,
    pub b1: LikertView,
    pub b2: LikertView,
    pub b3: LikertView,
    pub b4: LikertView,
    pub completion_rate: CompletionRate,
    pub iteration_statistics: IterationStatistics,
    /// Present once expert ratings exist.
    pub rubrics: Option<RubricSummary>,
}

/// Aggregates everything in the store.
pub fn compute_stats(store: &Store) -> Result<StatsView, StoreError> {
    let ratings: Vec<StudentTaskRating> = store.list(Kind::StudentRatings)?;
    let surveys: Vec<SurveyResponse> = store.list(Kind::Surveys)?;
    let submissions: Vec<Submission> = store.list(Kind::Submissions)?;
    let traces: Vec<GenerationTrace> = store.list(Kind::Traces)?;
    let experts: Vec<ExpertRating> = store.list(Kind::ExpertRatings)?;
    let pick = |f: fn(&SurveyResponse) -> u8| LikertView::of(&surveys.iter().map(f).collect::<Vec<_>>());
    let yes = ratings.iter().filter(|r| r.a3_solvable).count() as u64;
    let total = ratings.len() as u64;
    Ok(StatsView {
        a1: LikertView::of(&ratings.iter().map(|r| r.a1_context).collect::<Vec<_>>()),
        a2: LikertView::of(&ratings.iter().map(|r| r.a2_sensible).collect::<Vec<_>>()),
        a3: YesNoView { yes, no: total - yes, yes_rate: Ratio::new(yes, total) },
        b1: pick(|s| s.b1),
        b2: pick(|s| s.b2),
        b3: pick(|s| s.b3),
        b4: pick(|s| s.b4),
        completion_rate: completion_rate(&submissions),
        iteration_statistics: iteration_statistics(&traces),
        rubrics: primary_rubrics(store, &experts)?,
    })
}

/// Rubric summary over the tasks rated by the rater with the most ratings.
fn primary_rubrics(store: &Store, experts: &[ExpertRating]) -> Result<Option<RubricSummary>, StoreError> {
    let mut per_rater: BTreeMap<&str, usize> = BTreeMap::new();
    for r in experts {
        *per_rater.entry(&r.rater_id).or_default() += 1;
    }
    // Ties go to the smallest rater id.
    let Some((primary, _)) = per_rater.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
        return Ok(None);
    };
    let chosen: Vec<ExpertRating> = experts.iter().filter(|r| r.rater_id == *primary).cloned().collect();
    let rated: HashMap<&str, ()> = chosen.iter().map(|r| (r.task_id.as_str(), ())).collect();
    let tasks: Vec<Task> =
        store.list_tasks(&TaskFilter::default())?.into_iter().filter(|t| rated.contains_key(t.id.as_str())).collect();
    Ok(summarize_rubrics(&tasks, &chosen).ok())
}

async fn stats(State(state): State<Arc<AppState>>) -> ApiResult<Json<StatsView>> {
    Ok(Json(blocking(move || compute_stats(&state.store)).await??))
}
