#![allow(dead_code)]

use std::sync::Arc;

use taskgen::gateway::{CompletionProvider, Gateway, ScriptEntry, ScriptedProvider};
use taskgen::pipeline::{Pipeline, PipelineConfig};
use taskgen::prompt::TemplateSet;
use taskgen::sandbox::{find_interpreter, Sandbox, SandboxConfig};

pub const DESCRIPTION: &str =
    "Our music shop sells playlists. Write a function `add(a, b)` that returns the total length in \
minutes of two tracks of lengths `a` and `b`.";
pub const SKELETON: &str =
    "```python\ndef add(a, b):\n    \"\"\"Return a + b.\"\"\"\n    # TODO: implement\n    pass\n```";
pub const TESTS: &str =
    "```python\ndef test_add_small_tracks():\n    assert add(2, 3) == 5, \"two plus three minutes should be five\"\n\n\
def test_add_empty_track():\n    assert add(0, 7) == 7, \"adding an empty track keeps the length\"\n```";
pub const BROKEN: &str = "```python\ndef add(a, b):\n    return a - b\n```";
pub const FIXED: &str = "```python\ndef add(a, b):\n    total_minutes = a + b\n    return total_minutes\n```";

pub fn python_available() -> bool {
    find_interpreter("python3").is_some()
}

pub fn entry(matcher: &str, response: &str) -> ScriptEntry {
    ScriptEntry::new(matcher, response)
}

/// Script for one task whose successive solutions are `solutions`; every
/// revision of the tests returns the same tests.
pub fn task_script(solutions: &[&str]) -> Vec<ScriptEntry> {
    let mut s = vec![
        entry("Write the task description", DESCRIPTION),
        entry("Write the code skeleton", SKELETON),
        entry("Write the unit tests", TESTS),
        entry("Write the model solution", solutions[0]),
    ];
    for sol in &solutions[1..] {
        s.push(entry("Revise the unit tests", TESTS));
        s.push(entry("Revise the model solution", sol));
    }
    s
}

pub fn pipeline_with(provider: Arc<dyn CompletionProvider>) -> Pipeline {
    let sandbox = Sandbox::new(SandboxConfig::default());
    Pipeline::new(
        Arc::new(TemplateSet::defaults()),
        Arc::new(Gateway::new(provider)),
        sandbox,
        PipelineConfig::default(),
    )
    .expect("default pipeline config is valid")
}

pub fn scripted_pipeline(script: Vec<ScriptEntry>) -> Pipeline {
    pipeline_with(Arc::new(ScriptedProvider::new(script).expect("non-empty script")))
}

/// Per-bucket counts (1, 2 and 3 concepts) of a rated corpus.
pub struct BucketCounts {
    pub size: usize,
    pub e1: usize,
    pub e2: usize,
    pub e3: usize,
    pub e4: usize,
    /// Among the E2-positive tasks.
    pub e5: usize,
    pub e6: usize,
}

/// Per-bucket rubric counts of a 200-task reference corpus.
pub const REFERENCE_COUNTS: [BucketCounts; 3] = [
    BucketCounts { size: 100, e1: 87, e2: 89, e3: 94, e4: 100, e5: 74, e6: 70 },
    BucketCounts { size: 50, e1: 48, e2: 48, e3: 34, e4: 50, e5: 43, e6: 40 },
    BucketCounts { size: 50, e1: 44, e2: 48, e3: 20, e4: 50, e5: 41, e6: 38 },
];

/// Tasks and one rating each, realizing `counts` exactly.
pub fn rated_corpus(counts: &[BucketCounts; 3]) -> (Vec<taskgen::domain::Task>, Vec<taskgen::domain::ExpertRating>) {
    use taskgen::domain::{ExpertRating, GenerationRequest, Task, TaskStatus};
    let mut tasks = Vec::new();
    let mut ratings = Vec::new();
    for (k, c) in (1..=3usize).zip(counts) {
        for i in 0..c.size {
            let id = format!("b{k}-{i:03}");
            tasks.push(Task {
                id: id.clone(),
                request: GenerationRequest::new((0..k).map(|j| format!("concept {j}")), "Music", "English"),
                description: "d".into(),
                code_skeleton: String::new(),
                unit_tests: String::new(),
                model_solution: String::new(),
                status: if i < c.e1 { TaskStatus::Functional } else { TaskStatus::NonFunctional },
                iterations_used: 1,
                created_at: chrono::Utc::now(),
            });
            let e2 = i < c.e2;
            let e3 = i < c.e3;
            ratings.push(ExpertRating {
                task_id: id,
                rater_id: "expert-1".into(),
                e2_solvable: e2,
                e3_concepts: e3,
                e3_concepts_count: if e3 { k as u32 } else { k as u32 - 1 },
                e4_context: i < c.e4,
                e5_solution: e2.then_some(i < c.e5),
                e6_tests: e2.then_some(i < c.e6),
                issue_notes: String::new(),
            });
        }
    }
    (tasks, ratings)
}

/// Script for `n` tasks generated in order; every fourth task needs one repair.
pub fn batch_script(n: usize) -> Vec<ScriptEntry> {
    (0..n).flat_map(|i| if i % 4 == 3 { task_script(&[BROKEN, FIXED]) } else { task_script(&[FIXED]) }).collect()
}

pub fn write_script(path: &std::path::Path, script: &[ScriptEntry]) {
    std::fs::write(path, serde_json::to_string_pretty(script).unwrap()).unwrap();
}
