//! Headless corpus generation, sampling and reporting.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::Utc;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::assessment::{parse_expert_ratings, render_report, summarize_rubrics, AgreementSection, ReportInput};
use crate::domain::{normalize_request, ExpertRating, GenerationRequest, GenerationTrace, Task};
use crate::pipeline::{iteration_statistics, Pipeline, PipelineError};
use crate::store::{read_corpus, write_corpus, CorpusEntry, CorpusManifest};

pub const DEFAULT_CONTEXTS: &str = include_str!("../data/contexts.txt");
pub const DEFAULT_CONCEPTS: &str = include_str!("../data/concepts.txt");

#[derive(Debug, Error)]
pub enum BatchError {
    /// Bad flags, catalogs or input files.
    #[error("{0}")]
    Usage(String),
    /// Provider, sandbox or storage failures.
    #[error("{0}")]
    Infrastructure(String),
}

impl BatchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BatchError::Usage(_) => 2,
            BatchError::Infrastructure(_) => 3,
        }
    }
}

/// One entry per line; blank lines and `#` comments are skipped.
pub fn parse_catalog(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_string).collect()
}

pub fn parse_buckets(s: &str) -> Result<[usize; 3], BatchError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || BatchError::Usage(format!("--buckets expects a:b:c with non-negative integers, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTask {
    pub id: String,
    pub request: GenerationRequest,
}

/// Draws the requests of a batch: `buckets[k-1]` tasks with k distinct
/// concepts each, one uniformly drawn context per task. Draws are with
/// replacement across tasks.
pub fn plan_batch(
    count: usize,
    buckets: [usize; 3],
    contexts: &[String],
    concepts: &[String],
    seed: u64,
    teaching_language: &str,
) -> Result<Vec<PlannedTask>, BatchError> {
    let total: usize = buckets.iter().sum();
    if total != count {
        return Err(BatchError::Usage(format!("bucket sizes {buckets:?} sum to {total}, not --count {count}")));
    }
    if contexts.is_empty() || concepts.is_empty() {
        return Err(BatchError::Usage("context and concept catalogs must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(count);
    for (k, &n) in (1..=3).zip(&buckets) {
        if n > 0 && concepts.len() < k {
            return Err(BatchError::Usage(format!(
                "{k} distinct concepts needed but the catalog has {}",
                concepts.len()
            )));
        }
        for _ in 0..n {
            let context = contexts[rng.random_range(0..contexts.len())].clone();
            let picked: Vec<String> =
                index::sample(&mut rng, concepts.len(), k).iter().map(|i| concepts[i].clone()).collect();
            let i = plan.len();
            let mut request = GenerationRequest::new(picked, context, teaching_language);
            request.seed_metadata =
                Some(BTreeMap::from([("seed".to_string(), seed.to_string()), ("index".to_string(), i.to_string())]));
            plan.push(PlannedTask { id: format!("task-{:04}", i + 1), request: normalize_request(request) });
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOptions {
    pub workers: usize,
    /// Tasks allowed to end in `generation_failed` before the run aborts.
    pub failure_budget: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self { workers: 1, failure_budget: 0 }
    }
}

/// Runs the pipeline for every planned task and writes the corpus bundle.
///
/// Non-functional tasks are data and do not fail the run. Tasks whose
/// generation failed are kept as well, until their number exceeds the
/// failure budget.
pub fn run_batch(
    pipeline: &Pipeline,
    plan: &[PlannedTask],
    opts: &BatchOptions,
    out: &Path,
) -> Result<CorpusManifest, BatchError> {
    let next = AtomicUsize::new(0);
    let failures = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CorpusEntry>>> = Mutex::new(vec![None; plan.len()]);
    let abort: Mutex<Option<String>> = Mutex::new(None);
    let worker = || loop {
        if abort.lock().unwrap_or_else(|e| e.into_inner()).is_some() {
            return;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(planned) = plan.get(i) else { return };
        let entry = match pipeline.generate_task(&planned.request, &planned.id, Utc::now()) {
            Ok(g) => CorpusEntry { task: g.task, trace: g.trace, expert_ratings: Vec::new() },
            Err(PipelineError::GenerationFailed { cause, partial }) => {
                let n = failures.fetch_add(1, Ordering::SeqCst) + 1;
                tracing::warn!(task = %planned.id, error = %cause, failures = n, "generation failed");
                if n > opts.failure_budget {
                    *abort.lock().unwrap_or_else(|e| e.into_inner()) = Some(format!(
                        "{n} generation failure(s) exceed the budget of {}; last: {cause}",
                        opts.failure_budget
                    ));
                    return;
                }
                CorpusEntry { task: partial.task, trace: partial.trace, expert_ratings: Vec::new() }
            }
            Err(e) => {
                *abort.lock().unwrap_or_else(|e| e.into_inner()) = Some(e.to_string());
                return;
            }
        };
        tracing::info!(task = %planned.id, status = %entry.task.status, "generated");
        results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(entry);
    };
    std::thread::scope(|s| {
        for _ in 0..opts.workers.max(1) {
            s.spawn(worker);
        }
    });
    if let Some(reason) = abort.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(BatchError::Infrastructure(reason));
    }
    let entries: Vec<CorpusEntry> =
        results.into_inner().unwrap_or_else(|e| e.into_inner()).into_iter().flatten().collect();
    write_corpus(out, &entries).map_err(|e| BatchError::Infrastructure(e.to_string()))
}

/// Uniform sample of `n` task ids without replacement, in drawn order.
pub fn sample_ids(ids: &[String], n: usize, seed: u64) -> Result<Vec<String>, BatchError> {
    if n > ids.len() {
        return Err(BatchError::Usage(format!("cannot sample {n} of {} tasks", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, sorted.len(), n).iter().map(|i| sorted[i].clone()).collect())
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<CorpusEntry>), BatchError> {
    read_corpus(dir).map_err(|e| BatchError::Usage(format!("reading corpus {}: {e}", dir.display())))
}

pub fn load_ratings(path: &Path) -> Result<Vec<ExpertRating>, BatchError> {
    let file = std::fs::File::open(path).map_err(|e| BatchError::Usage(format!("{}: {e}", path.display())))?;
    parse_expert_ratings(file).map_err(|e| BatchError::Usage(format!("{}: {e}", path.display())))
}

fn check_against_tasks(
    ratings: &[ExpertRating],
    tasks: &BTreeMap<&str, &Task>,
    source: &Path,
) -> Result<(), BatchError> {
    for r in ratings {
        let task = tasks.get(r.task_id.as_str()).ok_or_else(|| {
            BatchError::Usage(format!(
                "{}: rating by {} names unknown task {}",
                source.display(),
                r.rater_id,
                r.task_id
            ))
        })?;
        r.validate_against(task).map_err(|e| {
            BatchError::Usage(format!("{}: rating of task {} by {}: {e}", source.display(), r.task_id, r.rater_id))
        })?;
    }
    Ok(())
}

/// Markdown report over a corpus, its ratings and an optional second-rater sample.
pub fn build_report(corpus: &Path, ratings: &Path, sample: Option<&Path>) -> Result<String, BatchError> {
    let (_, entries) = load_corpus(corpus)?;
    let tasks: Vec<Task> = entries.iter().map(|e| e.task.clone()).collect();
    let by_id: BTreeMap<&str, &Task> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let primary = load_ratings(ratings)?;
    check_against_tasks(&primary, &by_id, ratings)?;
    let summary =
        summarize_rubrics(&tasks, &primary).map_err(|e| BatchError::Usage(format!("{}: {e}", ratings.display())))?;
    let traces: Vec<GenerationTrace> = entries.into_iter().map(|e| e.trace).collect();
    let iterations = iteration_statistics(&traces);
    let agreement = match sample {
        Some(path) => {
            let second = load_ratings(path)?;
            check_against_tasks(&second, &by_id, path)?;
            Some(AgreementSection::compute(&primary, &second))
        }
        None => None,
    };
    Ok(render_report(&ReportInput { summary: &summary, agreement: agreement.as_ref(), iterations: Some(&iterations) }))
}
