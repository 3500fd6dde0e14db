use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{gwet_ac1, AgreementStats, AssessmentError, Ratio};
use crate::domain::{Document, ExpertRating, Task, TaskStatus};
use crate::pipeline::IterationStatistics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [Self::E1, Self::E2, Self::E3, Self::E4, Self::E5, Self::E6];
    /// The criteria judged by human raters.
    pub const RATED: [Criterion; 5] = [Self::E2, Self::E3, Self::E4, Self::E5, Self::E6];

    pub fn label(self) -> &'static str {
        match self {
            Self::E1 => "E1: Functional Task",
            Self::E2 => "E2: Solvable Task",
            Self::E3 => "E3: Programming Concept",
            Self::E4 => "E4: Contextualized Task",
            Self::E5 => "E5: Model Solution",
            Self::E6 => "E6: Unit Tests",
        }
    }

    fn judge(self, r: &ExpertRating) -> Option<bool> {
        match self {
            Self::E1 => None,
            Self::E2 => Some(r.e2_solvable),
            Self::E3 => Some(r.e3_concepts),
            Self::E4 => Some(r.e4_context),
            Self::E5 => r.e5_solution,
            Self::E6 => r.e6_tests,
        }
    }
}

/// Concept-count column of the summary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    One,
    Two,
    Three,
    All,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Self::One, Self::Two, Self::Three, Self::All];

    pub fn of_count(concepts: usize) -> Option<Bucket> {
        match concepts {
            1 => Some(Self::One),
            2 => Some(Self::Two),
            3 => Some(Self::Three),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn heading(self) -> &'static str {
        match self {
            Self::One => "1",
            Self::Two => "2",
            Self::Three => "3",
            Self::All => "Sum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricRow {
    pub criterion: Criterion,
    /// Indexed like [`Bucket::ALL`].
    pub cells: [Ratio; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricSummary {
    pub bucket_sizes: [u64; 4],
    pub rows: Vec<RubricRow>,
}

impl RubricSummary {
    pub fn cell(&self, criterion: Criterion, bucket: Bucket) -> Ratio {
        self.rows.iter().find(|r| r.criterion == criterion).map(|r| r.cells[bucket.index()]).unwrap_or_default()
    }
}

/// Table of E1 (from task status) and E2 to E6 (from one rating per task).
///
/// Tasks with a concept count outside 1..=3 count toward the overall column
/// only. E5 and E6 are judged only for tasks rated solvable (E2), so their
/// denominators are the E2-positive counts. Ratings of tasks not listed are
/// ignored.
pub fn summarize_rubrics(tasks: &[Task], ratings: &[ExpertRating]) -> Result<RubricSummary, AssessmentError> {
    let listed: HashSet<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    let mut by_task: HashMap<&str, &ExpertRating> = HashMap::new();
    for r in ratings.iter().filter(|r| listed.contains(r.task_id.as_str())) {
        if by_task.insert(r.task_id.as_str(), r).is_some() {
            return Err(AssessmentError::DuplicateRating(r.task_id.clone()));
        }
    }
    let mut sizes = [0u64; 4];
    let mut counts: BTreeMap<Criterion, [(u64, u64); 4]> = Criterion::ALL.iter().map(|&c| (c, [(0, 0); 4])).collect();
    for task in tasks {
        let rating = *by_task.get(task.id.as_str()).ok_or_else(|| AssessmentError::MissingRating(task.id.clone()))?;
        let columns: Vec<usize> =
            Bucket::of_count(task.concept_count()).into_iter().chain([Bucket::All]).map(Bucket::index).collect();
        for &col in &columns {
            sizes[col] += 1;
        }
        for criterion in Criterion::ALL {
            let verdict = match criterion {
                Criterion::E1 => Some(task.status == TaskStatus::Functional),
                Criterion::E5 | Criterion::E6 if !rating.e2_solvable => None,
                Criterion::E5 | Criterion::E6 => {
                    Some(criterion.judge(rating).ok_or(AssessmentError::MissingCriterion {
                        task_id: task.id.clone(),
                        criterion: if criterion == Criterion::E5 { "e5" } else { "e6" },
                    })?)
                }
                _ => criterion.judge(rating),
            };
            if let Some(v) = verdict {
                let cells = counts.get_mut(&criterion).expect("all criteria present");
                for &col in &columns {
                    cells[col].0 += v as u64;
                    cells[col].1 += 1;
                }
            }
        }
    }
    let rows = counts
        .into_iter()
        .map(|(criterion, cells)| RubricRow { criterion, cells: cells.map(|(n, d)| Ratio::new(n, d)) })
        .collect();
    Ok(RubricSummary { bucket_sizes: sizes, rows })
}

/// Agreement between a primary rating set and a second rater's sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSection {
    /// Tasks rated by both raters.
    pub sample_size: usize,
    pub per_criterion: Vec<(Criterion, Option<AgreementStats>)>,
    /// All per-criterion pairs pooled into one set.
    pub pooled: Option<AgreementStats>,
    /// One pair per task: whether the rater accepted every criterion.
    pub per_task: Option<AgreementStats>,
}

impl AgreementSection {
    /// Pairs each second-rater rating with the primary rating of the same
    /// task. E5 and E6 pairs exist only where both raters judged them.
    pub fn compute(primary: &[ExpertRating], second: &[ExpertRating]) -> Self {
        let by_task: HashMap<&str, &ExpertRating> = primary.iter().map(|r| (r.task_id.as_str(), r)).collect();
        let matched: Vec<(&ExpertRating, &ExpertRating)> =
            second.iter().filter_map(|b| by_task.get(b.task_id.as_str()).map(|a| (*a, b))).collect();
        let mut pooled = Vec::new();
        let per_criterion = Criterion::RATED
            .iter()
            .map(|&c| {
                let pairs: Vec<(bool, bool)> =
                    matched.iter().filter_map(|(a, b)| Some((c.judge(a)?, c.judge(b)?))).collect();
                pooled.extend_from_slice(&pairs);
                (c, gwet_ac1(&pairs).ok())
            })
            .collect();
        let accepted = |r: &ExpertRating| Criterion::RATED.iter().all(|c| c.judge(r).unwrap_or(false));
        let per_task: Vec<(bool, bool)> = matched.iter().map(|(a, b)| (accepted(a), accepted(b))).collect();
        Self {
            sample_size: matched.len(),
            per_criterion,
            pooled: gwet_ac1(&pooled).ok(),
            per_task: gwet_ac1(&per_task).ok(),
        }
    }

    fn ac1_for(&self, c: Criterion) -> Option<f64> {
        self.per_criterion.iter().find(|(k, _)| *k == c).and_then(|(_, s)| s.map(|s| s.ac1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct CsvError {
    pub line: u64,
    pub message: String,
}

const CSV_HEADER: [&str; 9] = ["task_id", "rater_id", "e2", "e3", "e3_count", "e4", "e5", "e6", "notes"];

fn yes_no(field: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "y" | "Y" => Ok(true),
        "n" | "N" => Ok(false),
        other => Err(format!("{field} must be y or n, got {other:?}")),
    }
}

/// Reads expert ratings in the `task_id,rater_id,e2,e3,e3_count,e4,e5,e6,notes`
/// layout. E5 and E6 must be empty when E2 is `n` and present otherwise.
pub fn parse_expert_ratings<R: Read>(reader: R) -> Result<Vec<ExpertRating>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(reader);
    let header = rdr.headers().map_err(|e| CsvError { line: 1, message: e.to_string() })?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(CsvError { line: 1, message: format!("header must be `{}`", CSV_HEADER.join(",")) });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record =
            record.map_err(|e| CsvError { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| CsvError { line, message };
        let get = |i: usize| record.get(i).unwrap_or("");
        let e2 = yes_no("e2", get(2)).map_err(err)?;
        let gated = |name: &str, value: &str| -> Result<Option<bool>, CsvError> {
            match (e2, value.is_empty()) {
                (false, true) => Ok(None),
                (false, false) => Err(err(format!("{name} must be empty when e2 = n"))),
                (true, true) => Err(err(format!("{name} is required when e2 = y"))),
                (true, false) => yes_no(name, value).map(Some).map_err(err),
            }
        };
        let rating = ExpertRating {
            task_id: get(0).to_string(),
            rater_id: get(1).to_string(),
            e2_solvable: e2,
            e3_concepts: yes_no("e3", get(3)).map_err(err)?,
            e3_concepts_count: get(4)
                .parse()
                .map_err(|_| err(format!("e3_count must be a non-negative integer, got {:?}", get(4))))?,
            e4_context: yes_no("e4", get(5)).map_err(err)?,
            e5_solution: gated("e5", get(6))?,
            e6_tests: gated("e6", get(7))?,
            issue_notes: get(8).to_string(),
        };
        rating.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert((rating.task_id.clone(), rating.rater_id.clone())) {
            return Err(err(format!("duplicate rating of task {} by {}", rating.task_id, rating.rater_id)));
        }
        out.push(rating);
    }
    Ok(out)
}

pub struct ReportInput<'a> {
    pub summary: &'a RubricSummary,
    pub agreement: Option<&'a AgreementSection>,
    pub iterations: Option<&'a IterationStatistics>,
}

fn stats_row(label: &str, s: &Option<AgreementStats>) -> String {
    match s {
        Some(s) => format!("| {label} | {} | {:.3} | {:.3} | {:.3} | {:.3} |\n", s.n, s.pa, s.pi_hat, s.pe, s.ac1),
        None => format!("| {label} | 0 | n/a | n/a | n/a | n/a |\n"),
    }
}

/// Markdown report: the summary table, then iteration and agreement appendices.
pub fn render_report(input: &ReportInput<'_>) -> String {
    let s = input.summary;
    let mut out = String::from("# Assessment report\n\n## Expert and automated assessment\n\n");
    let _ = write!(out, "| Criteria |");
    for b in &Bucket::ALL[..3] {
        let _ = write!(out, " {} (n={}) |", b.heading(), s.bucket_sizes[b.index()]);
    }
    let _ = writeln!(out, " Sum (n={}) | AC1 |", s.bucket_sizes[Bucket::All.index()]);
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for row in &s.rows {
        let _ = write!(out, "| {} |", row.criterion.label());
        for cell in &row.cells {
            let _ = write!(out, " {} ({}/{}) |", cell.display_percent(), cell.numerator, cell.denominator);
        }
        let ac1 = input.agreement.and_then(|a| a.ac1_for(row.criterion)).map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(out, " {ac1} |");
    }

    if let Some(it) = input.iterations {
        out.push_str("\n## Generation iterations\n\n| First functional at | Tasks |\n|---|---:|\n");
        for (k, n) in it.first_functional.iter().enumerate() {
            let _ = writeln!(out, "| iteration {} | {} |", k + 1, n);
        }
        let _ = writeln!(out, "| never | {} |", it.never_functional);
        let _ = writeln!(out, "\nTasks with at least one iteration: {}.", it.total);
        let _ = writeln!(
            out,
            "Repaired by reflection: {}/{} ({}).",
            it.repair_rate.numerator,
            it.repair_rate.denominator,
            it.repair_rate.display_percent()
        );
    }

    if let Some(a) = input.agreement {
        let _ = writeln!(out, "\n## Inter-rater agreement\n\nTasks rated by both raters: {}.\n", a.sample_size);
        out.push_str("| Set | Pairs | Pa | pi | Pe | AC1 |\n|---|---:|---:|---:|---:|---:|\n");
        for (c, stats) in &a.per_criterion {
            out.push_str(&stats_row(c.label(), stats));
        }
        out.push_str(&stats_row("Overall, criterion pairs pooled", &a.pooled));
        out.push_str(&stats_row("Overall, per task (all criteria met)", &a.per_task));
    }
    out
}
