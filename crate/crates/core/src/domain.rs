//! Shared value types, their invariants, and the canonical JSON document form.
//!
//! Every persisted or exchanged document is UTF-8 JSON with a top-level
//! `"schema_version": 1` field followed by the type's own snake_case fields.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Cap applied to every free-text request field, in characters.
pub const MAX_FIELD_CHARS: usize = 200;

/// Upper bound on generation attempts recorded for one task.
pub const MAX_ITERATIONS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub concepts: Vec<String>,
    pub context: String,
    pub teaching_language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_metadata: Option<BTreeMap<String, String>>,
}

impl GenerationRequest {
    pub fn new<I, S>(concepts: I, context: impl Into<String>, teaching_language: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            concepts: concepts.into_iter().map(Into::into).collect(),
            context: context.into(),
            teaching_language: teaching_language.into(),
            seed_metadata: None,
        }
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => s[..idx].to_string(),
        None => s.to_string(),
    }
}

/// Trims, truncates and de-duplicates the free-text fields of a request.
///
/// Concepts are compared case-insensitively after trimming; the first
/// occurrence wins. Empty concept lists and empty contexts stay valid.
pub fn normalize_request(raw: GenerationRequest) -> GenerationRequest {
    let mut seen = HashSet::new();
    let mut concepts = Vec::with_capacity(raw.concepts.len());
    for concept in &raw.concepts {
        let trimmed = truncate_chars(concept.trim(), MAX_FIELD_CHARS);
        let trimmed = trimmed.trim_end().to_string();
        if trimmed.is_empty() {
            continue;
        }
        if seen.insert(trimmed.to_lowercase()) {
            concepts.push(trimmed);
        }
    }
    let context = truncate_chars(raw.context.trim(), MAX_FIELD_CHARS).trim_end().to_string();
    GenerationRequest { concepts, context, teaching_language: raw.teaching_language, seed_metadata: raw.seed_metadata }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Functional,
    NonFunctional,
    GenerationFailed,
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskStatus::Functional => "functional",
            TaskStatus::NonFunctional => "non_functional",
            TaskStatus::GenerationFailed => "generation_failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub request: GenerationRequest,
    pub description: String,
    pub code_skeleton: String,
    pub unit_tests: String,
    pub model_solution: String,
    pub status: TaskStatus,
    pub iterations_used: u32,
    pub created_at: DateTime<Utc>,
}

impl Task {
    pub fn concept_count(&self) -> usize {
        self.request.concept_count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub passed: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub compile_ok: bool,
    pub tests: Vec<TestResult>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub wall_time_ms: u64,
}

impl ExecutionOutcome {
    /// Loaded, finished in time, ran at least one test, and every test passed.
    pub fn all_passed(&self) -> bool {
        self.compile_ok && !self.timed_out && !self.tests.is_empty() && self.tests.iter().all(|t| t.passed)
    }

    pub fn passed_count(&self) -> usize {
        self.tests.iter().filter(|t| t.passed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub model_solution: String,
    pub unit_tests: String,
    pub outcome: ExecutionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub task_id: String,
    pub iterations: Vec<IterationRecord>,
}

impl GenerationTrace {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self { task_id: task_id.into(), iterations: Vec::new() }
    }

    pub fn final_outcome(&self) -> Option<&ExecutionOutcome> {
        self.iterations.last().map(|it| &it.outcome)
    }

    /// 1-based index of the first iteration whose run passed, if any.
    pub fn first_functional_iteration(&self) -> Option<u32> {
        self.iterations.iter().find(|it| it.outcome.all_passed()).map(|it| it.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRating {
    pub task_id: String,
    pub rater_id: String,
    pub e2_solvable: bool,
    pub e3_concepts: bool,
    pub e3_concepts_count: u32,
    pub e4_context: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e5_solution: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e6_tests: Option<bool>,
    #[serde(default)]
    pub issue_notes: String,
}

impl ExpertRating {
    /// Checks the concept-count invariant, which needs the rated task's request.
    pub fn validate_against(&self, task: &Task) -> Result<(), ValidationError> {
        self.validate()?;
        let requested = task.concept_count() as u32;
        if self.e3_concepts_count > requested {
            return Err(ValidationError::new(
                "e3_concepts_count",
                format!("{} exceeds the {} requested concepts", self.e3_concepts_count, requested),
            ));
        }
        if self.e3_concepts != (self.e3_concepts_count == requested) {
            return Err(ValidationError::new(
                "e3_concepts",
                format!(
                    "must be true exactly when all {} requested concepts are incorporated (count = {})",
                    requested, self.e3_concepts_count
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTaskRating {
    pub task_id: String,
    pub a1_context: u8,
    pub a2_sensible: u8,
    pub a3_solvable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub respondent_id: String,
    pub b1: u8,
    pub b2: u8,
    pub b3: u8,
    pub b4: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub submitted_code: String,
    pub outcome: ExecutionOutcome,
    pub solved: bool,
    pub submitted_at: DateTime<Utc>,
}

impl Submission {
    pub fn new(
        task_id: impl Into<String>,
        code: impl Into<String>,
        outcome: ExecutionOutcome,
        at: DateTime<Utc>,
    ) -> Self {
        let solved = outcome.all_passed();
        Self { task_id: task_id.into(), submitted_code: code.into(), outcome, solved, submitted_at: at }
    }
}

/// An invariant violation, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid `{field}`: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }

    fn nested(self, parent: &str) -> Self {
        Self { field: format!("{parent}.{}", self.field), message: self.message }
    }
}

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("document is not valid JSON: {0}")]
    Syntax(String),
    #[error("missing `schema_version`")]
    MissingSchemaVersion,
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    UnsupportedSchema { found: serde_json::Value },
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

impl DocumentError {
    /// Name of the field the document was rejected for, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            DocumentError::Field { field, .. } => Some(field),
            DocumentError::Invalid(v) => Some(&v.field),
            DocumentError::MissingSchemaVersion | DocumentError::UnsupportedSchema { .. } => Some("schema_version"),
            DocumentError::Syntax(_) => None,
        }
    }
}

/// A type with a canonical versioned JSON document form.
pub trait Document: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<(), ValidationError>;
}

fn likert_field(field: &str, value: u8) -> Result<(), ValidationError> {
    if (1..=5).contains(&value) {
        Ok(())
    } else {
        Err(ValidationError::new(field, format!("{value} is outside 1..5")))
    }
}

impl Document for GenerationRequest {
    fn validate(&self) -> Result<(), ValidationError> {
        let mut seen = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            let field = format!("concepts[{i}]");
            if c.trim() != c || c.is_empty() {
                return Err(ValidationError::new(field, "must be trimmed and non-empty"));
            }
            if c.chars().count() > MAX_FIELD_CHARS {
                return Err(ValidationError::new(field, format!("longer than {MAX_FIELD_CHARS} characters")));
            }
            if !seen.insert(c.to_lowercase()) {
                return Err(ValidationError::new(field, "duplicate concept"));
            }
        }
        if self.context.chars().count() > MAX_FIELD_CHARS {
            return Err(ValidationError::new("context", format!("longer than {MAX_FIELD_CHARS} characters")));
        }
        if self.context.trim() != self.context {
            return Err(ValidationError::new("context", "must be trimmed"));
        }
        Ok(())
    }
}

impl Document for Task {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must not be empty"));
        }
        self.request.validate().map_err(|e| e.nested("request"))?;
        // A failed generation may stop before the first sandbox run.
        let min = if self.status == TaskStatus::GenerationFailed { 0 } else { 1 };
        if !(min..=MAX_ITERATIONS).contains(&self.iterations_used) {
            return Err(ValidationError::new(
                "iterations_used",
                format!("{} is outside {min}..{MAX_ITERATIONS}", self.iterations_used),
            ));
        }
        Ok(())
    }
}

impl Document for ExecutionOutcome {
    fn validate(&self) -> Result<(), ValidationError> {
        if !self.compile_ok && !self.tests.is_empty() {
            return Err(ValidationError::new("tests", "must be empty when compile_ok is false"));
        }
        Ok(())
    }
}

impl Document for GenerationTrace {
    fn validate(&self) -> Result<(), ValidationError> {
        if self.iterations.len() > MAX_ITERATIONS as usize {
            return Err(ValidationError::new(
                "iterations",
                format!("{} iterations exceed the limit of {MAX_ITERATIONS}", self.iterations.len()),
            ));
        }
        let last = self.iterations.len();
        for (pos, it) in self.iterations.iter().enumerate() {
            let field = format!("iterations[{pos}]");
            if it.index as usize != pos + 1 {
                return Err(ValidationError::new(format!("{field}.index"), format!("expected {}", pos + 1)));
            }
            it.outcome.validate().map_err(|e| e.nested(&format!("{field}.outcome")))?;
            let has_next = pos + 1 < last;
            if it.reflection_feedback.is_some() != has_next {
                return Err(ValidationError::new(
                    format!("{field}.reflection_feedback"),
                    "must be present exactly when a following iteration exists",
                ));
            }
        }
        Ok(())
    }
}

impl Document for ExpertRating {
    fn validate(&self) -> Result<(), ValidationError> {
        let gated = [("e5_solution", self.e5_solution.is_some()), ("e6_tests", self.e6_tests.is_some())];
        for (field, present) in gated {
            if present != self.e2_solvable {
                let msg = if self.e2_solvable {
                    "required when e2_solvable is true"
                } else {
                    "must be absent when e2_solvable is false"
                };
                return Err(ValidationError::new(field, msg));
            }
        }
        Ok(())
    }
}

impl Document for StudentTaskRating {
    fn validate(&self) -> Result<(), ValidationError> {
        likert_field("a1_context", self.a1_context)?;
        likert_field("a2_sensible", self.a2_sensible)
    }
}

impl Document for SurveyResponse {
    fn validate(&self) -> Result<(), ValidationError> {
        likert_field("b1", self.b1)?;
        likert_field("b2", self.b2)?;
        likert_field("b3", self.b3)?;
        likert_field("b4", self.b4)
    }
}

impl Document for Submission {
    fn validate(&self) -> Result<(), ValidationError> {
        self.outcome.validate().map_err(|e| e.nested("outcome"))?;
        if self.solved != self.outcome.all_passed() {
            return Err(ValidationError::new("solved", "must equal whether the outcome passed every test"));
        }
        Ok(())
    }
}

/// Checks the invariants tying a task to its trace.
pub fn validate_task_with_trace(task: &Task, trace: &GenerationTrace) -> Result<(), ValidationError> {
    task.validate()?;
    trace.validate()?;
    if trace.task_id != task.id {
        return Err(ValidationError::new("task_id", "trace belongs to a different task"));
    }
    if trace.iterations.len() as u32 != task.iterations_used {
        return Err(ValidationError::new(
            "iterations_used",
            format!("task says {} but the trace holds {}", task.iterations_used, trace.iterations.len()),
        ));
    }
    let passed = trace.final_outcome().is_some_and(ExecutionOutcome::all_passed);
    if (task.status == TaskStatus::Functional) != passed {
        return Err(ValidationError::new("status", "functional must match a passing final run"));
    }
    Ok(())
}

#[derive(Serialize)]
struct Versioned<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    inner: &'a T,
}

/// Canonical JSON document for `value`.
pub fn to_document<T: Document>(value: &T) -> String {
    serde_json::to_string_pretty(&Versioned { schema_version: SCHEMA_VERSION, inner: value })
        .expect("domain types always serialize")
}

/// Parses and validates a canonical document.
pub fn from_document<T: Document>(text: &str) -> Result<T, DocumentError> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| DocumentError::Syntax(e.to_string()))?;
    let obj = value.as_object_mut().ok_or_else(|| DocumentError::Syntax("top level must be an object".into()))?;
    match obj.remove("schema_version") {
        None => return Err(DocumentError::MissingSchemaVersion),
        Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(found) => return Err(DocumentError::UnsupportedSchema { found }),
    }
    let parsed: T = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = if path == "." { field_from_message(&inner) } else { path };
        DocumentError::Field { field, message: inner }
    })?;
    parsed.validate()?;
    Ok(parsed)
}

// serde reports a missing top-level field as "missing field `x`" at path ".".
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| ".".into())
}

pub fn serialize_task(task: &Task) -> String {
    to_document(task)
}

pub fn deserialize_task(doc: &str) -> Result<Task, DocumentError> {
    from_document(doc)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn task_with_tests(tests: &str) -> Task {
        Task {
            id: "t-1".into(),
            request: GenerationRequest::new(["recursion"], "music", "python"),
            description: "Write `count_notes`.".into(),
            code_skeleton: "def count_notes(xs):\n    pass\n".into(),
            unit_tests: tests.into(),
            model_solution: "def count_notes(xs):\n    return len(xs)\n".into(),
            status: TaskStatus::Functional,
            iterations_used: 1,
            created_at: Utc.with_ymd_and_hms(2024, 6, 1, 12, 0, 0).unwrap(),
        }
    }
}
