//! Task generation: four component prompts, then execute-and-reflect repair.
//!
//! Order is description, skeleton, tests, solution. The solution is run
//! against the tests; on failure the diagnostics are fed back and both the
//! tests and the solution are regenerated, up to `max_iterations` runs in
//! total. Description and skeleton are produced once and never revised.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::Ratio;
use crate::domain::{
    ExecutionOutcome, GenerationRequest, GenerationTrace, IterationRecord, Task, TaskStatus, MAX_ITERATIONS,
};
use crate::gateway::{Gateway, GatewayError, ModelConfigSet};
use crate::prompt::{Component, Placeholder, PromptError, PromptMessages, TemplateSet};
use crate::sandbox::{sanitize_source, Sandbox, SandboxError, SandboxLimits};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub max_iterations: u32,
    pub models: ModelConfigSet,
    pub limits: SandboxLimits,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { max_iterations: MAX_ITERATIONS, models: ModelConfigSet::default(), limits: SandboxLimits::default() }
    }
}

#[derive(Debug, Error)]
pub enum GenerationFailure {
    #[error(transparent)]
    Provider(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    /// The partial task (status `generation_failed`) and trace are kept.
    #[error("task generation failed: {cause}")]
    GenerationFailed { cause: GenerationFailure, partial: Box<Generated> },
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub task: Task,
    pub trace: GenerationTrace,
}

pub struct Pipeline {
    templates: Arc<TemplateSet>,
    gateway: Arc<Gateway>,
    sandbox: Sandbox,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        templates: Arc<TemplateSet>,
        gateway: Arc<Gateway>,
        sandbox: Sandbox,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        if !(1..=MAX_ITERATIONS).contains(&config.max_iterations) {
            return Err(PipelineError::InvalidConfig(format!(
                "max_iterations must be within 1..={MAX_ITERATIONS}, got {}",
                config.max_iterations
            )));
        }
        config.limits.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        Ok(Self { templates, gateway, sandbox, config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Generates one task for an already-normalized request.
    pub fn generate_task(
        &self,
        request: &GenerationRequest,
        task_id: &str,
        created_at: DateTime<Utc>,
    ) -> Result<Generated, PipelineError> {
        let mut run = Run {
            pipeline: self,
            request,
            prior: BTreeMap::new(),
            out: Generated {
                task: Task {
                    id: task_id.to_string(),
                    request: request.clone(),
                    description: String::new(),
                    code_skeleton: String::new(),
                    unit_tests: String::new(),
                    model_solution: String::new(),
                    status: TaskStatus::GenerationFailed,
                    iterations_used: 0,
                    created_at,
                },
                trace: GenerationTrace::new(task_id),
            },
        };
        match run.execute() {
            Ok(()) => Ok(run.out),
            Err(cause) => {
                tracing::warn!(task = task_id, error = %cause, "generation failed");
                run.out.task.status = TaskStatus::GenerationFailed;
                Err(PipelineError::GenerationFailed { cause, partial: Box::new(run.out) })
            }
        }
    }

    fn complete(&self, component: Component, messages: &PromptMessages) -> Result<String, GatewayError> {
        self.gateway.complete(messages, self.config.models.get(component))
    }
}

struct Run<'a> {
    pipeline: &'a Pipeline,
    request: &'a GenerationRequest,
    prior: BTreeMap<Placeholder, String>,
    out: Generated,
}

impl Run<'_> {
    fn generate(&mut self, component: Component) -> Result<String, GenerationFailure> {
        let messages = self.pipeline.templates.render(component, self.request, &self.prior)?;
        Ok(self.pipeline.complete(component, &messages)?)
    }

    fn revise(&self, target: Component, previous: &str) -> Result<String, GenerationFailure> {
        let messages = self.pipeline.templates.render_revision(target, self.request, &self.prior, previous)?;
        Ok(self.pipeline.complete(target, &messages)?)
    }

    fn execute(&mut self) -> Result<(), GenerationFailure> {
        let description = self.generate(Component::Description)?;
        self.out.task.description = description.trim().to_string();
        self.prior.insert(Placeholder::Description, self.out.task.description.clone());

        let skeleton = sanitize_source(&self.generate(Component::Skeleton)?);
        self.out.task.code_skeleton = skeleton.clone();
        self.prior.insert(Placeholder::Skeleton, skeleton);

        let mut tests_raw = self.generate(Component::Tests)?;
        self.prior.insert(Placeholder::Tests, sanitize_source(&tests_raw));
        let mut solution_raw = self.generate(Component::Solution)?;

        let limits = &self.pipeline.config.limits;
        let max = self.pipeline.config.max_iterations;
        for index in 1..=max {
            let tests = sanitize_source(&tests_raw);
            let solution = sanitize_source(&solution_raw);
            let outcome = self.pipeline.sandbox.run_solution_against_tests(&solution, &tests, limits)?;
            let passed = evaluate_e1(&outcome);
            let (compiler_output, test_results) = describe_outcome(&outcome, limits);
            self.out.trace.iterations.push(IterationRecord {
                index,
                model_solution: solution_raw.clone(),
                unit_tests: tests_raw.clone(),
                outcome,
                reflection_feedback: None,
            });
            self.out.task.unit_tests = tests.clone();
            self.out.task.model_solution = solution.clone();
            self.out.task.iterations_used = index;
            if passed {
                self.out.task.status = TaskStatus::Functional;
                return Ok(());
            }
            if index == max {
                break;
            }

            self.prior.insert(Placeholder::Tests, tests);
            self.prior.insert(Placeholder::Solution, solution);
            self.prior.insert(Placeholder::CompilerOutput, compiler_output.clone());
            self.prior.insert(Placeholder::TestResults, test_results.clone());
            let new_tests = self.revise(Component::Tests, &tests_raw)?;
            let new_solution = self.revise(Component::Solution, &solution_raw)?;
            // Feedback is recorded only once the next iteration is certain to exist.
            if let Some(last) = self.out.trace.iterations.last_mut() {
                last.reflection_feedback =
                    Some(format!("Compiler output:\n{compiler_output}\n\nTest results:\n{test_results}"));
            }
            tests_raw = new_tests;
            solution_raw = new_solution;
        }
        self.out.task.status = TaskStatus::NonFunctional;
        Ok(())
    }
}

/// Compiler output and test results as fed back to the model.
fn describe_outcome(outcome: &ExecutionOutcome, limits: &SandboxLimits) -> (String, String) {
    let stderr = outcome.stderr.trim();
    let compiler = if outcome.timed_out {
        let mut s = format!("Execution was stopped after {} ms: time limit exceeded.", limits.wall_timeout_ms);
        if !stderr.is_empty() {
            s.push('\n');
            s.push_str(stderr);
        }
        s
    } else if stderr.is_empty() {
        "(no errors)".to_string()
    } else {
        stderr.to_string()
    };
    let results = if !outcome.compile_ok {
        "No tests ran because the code could not be loaded.".to_string()
    } else if outcome.tests.is_empty() {
        "No tests were found or executed.".to_string()
    } else {
        let mut lines: Vec<String> = outcome
            .tests
            .iter()
            .map(|t| if t.passed { format!("- {}: PASS", t.name) } else { format!("- {}: FAIL {}", t.name, t.message) })
            .collect();
        lines.push(format!("Passed {} of {} tests.", outcome.passed_count(), outcome.tests.len()));
        lines.join("\n")
    };
    (compiler, results)
}

/// Functional-task check: loaded, in time, at least one test, all passed.
pub fn evaluate_e1(outcome: &ExecutionOutcome) -> bool {
    outcome.compile_ok && !outcome.timed_out && !outcome.tests.is_empty() && outcome.tests.iter().all(|t| t.passed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationStatistics {
    /// `first_functional[k - 1]` counts traces first passing at iteration k.
    pub first_functional: [u64; MAX_ITERATIONS as usize],
    pub never_functional: u64,
    pub total: u64,
    /// Traces repaired by reflection over traces failing their first run.
    pub repair_rate: Ratio,
}

/// Per-iteration functional counts. Traces without any iteration (a failed
/// generation) are skipped.
pub fn iteration_statistics(traces: &[GenerationTrace]) -> IterationStatistics {
    let mut first = [0u64; MAX_ITERATIONS as usize];
    let mut never = 0;
    let mut total = 0;
    for trace in traces.iter().filter(|t| !t.iterations.is_empty()) {
        total += 1;
        match trace.first_functional_iteration() {
            Some(k) if (1..=MAX_ITERATIONS).contains(&k) => first[k as usize - 1] += 1,
            _ => never += 1,
        }
    }
    let repaired: u64 = first[1..].iter().sum();
    IterationStatistics {
        first_functional: first,
        never_functional: never,
        total,
        repair_rate: Ratio::new(repaired, total - first[0]),
    }
}
