//! Evaluation statistics: rubric summaries, agreement, Likert summaries,
//! completion rates and free-text categorization. All pure functions.

mod rubric;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::Submission;

pub use rubric::{
    parse_expert_ratings, render_report, summarize_rubrics, AgreementSection, Bucket, Criterion, CsvError, ReportInput,
    RubricSummary,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssessmentError {
    #[error("input is empty")]
    EmptyInput,
    #[error("value {0} is outside 1..=5")]
    OutOfRange(i64),
    #[error("no rating for task {0}")]
    MissingRating(String),
    #[error("more than one rating for task {0}")]
    DuplicateRating(String),
    #[error("rating for task {task_id} lacks {criterion}")]
    MissingCriterion { task_id: String, criterion: &'static str },
}

/// A count over a count. Formats as a percentage with one decimal,
/// rounded half up; an empty denominator formats as "n/a".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        debug_assert!(numerator <= denominator || denominator == 0);
        Self { numerator, denominator }
    }

    pub fn value(&self) -> Option<f64> {
        (self.denominator > 0).then(|| self.numerator as f64 / self.denominator as f64)
    }

    /// Percentage in tenths of a percent, rounded half up, in exact integer arithmetic.
    pub fn percent_tenths(&self) -> Option<u64> {
        let (n, d) = (self.numerator as u128, self.denominator as u128);
        (d > 0).then(|| ((2000 * n + d) / (2 * d)) as u64)
    }

    pub fn display_percent(&self) -> String {
        match self.percent_tenths() {
            None => "n/a".to_string(),
            Some(1000) => "100%".to_string(),
            Some(t) => format!("{}.{}%", t / 10, t % 10),
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({})", self.numerator, self.denominator, self.display_percent())
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out {
            numerator: u64,
            denominator: u64,
            percent: String,
        }
        Out { numerator: self.numerator, denominator: self.denominator, percent: self.display_percent() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct In {
            numerator: u64,
            denominator: u64,
        }
        let v = In::deserialize(d)?;
        Ok(Ratio { numerator: v.numerator, denominator: v.denominator })
    }
}

pub fn percent_agreement(pairs: &[(bool, bool)]) -> Result<f64, AssessmentError> {
    if pairs.is_empty() {
        return Err(AssessmentError::EmptyInput);
    }
    let agree = pairs.iter().filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n: usize,
    pub pa: f64,
    pub pi_hat: f64,
    pub pe: f64,
    pub ac1: f64,
}

/// Gwet's AC1 for two raters and a binary category.
///
/// With `pe = 2 pi (1 - pi)` chance agreement never exceeds 0.5, so the
/// coefficient is always defined.
pub fn gwet_ac1(pairs: &[(bool, bool)]) -> Result<AgreementStats, AssessmentError> {
    let pa = percent_agreement(pairs)?;
    let n = pairs.len();
    let yes: usize = pairs.iter().map(|&(a, b)| a as usize + b as usize).sum();
    let pi_hat = yes as f64 / (2 * n) as f64;
    let pe = 2.0 * pi_hat * (1.0 - pi_hat);
    Ok(AgreementStats { n, pa, pi_hat, pe, ac1: (pa - pe) / (1.0 - pe) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` below two values.
    pub sd: Option<f64>,
    /// Counts of the levels 1 through 5.
    pub histogram: [u64; 5],
}

impl LikertSummary {
    pub fn display_mean(&self) -> String {
        format!("{:.2}", self.mean)
    }

    pub fn display_sd(&self) -> String {
        self.sd.map_or_else(|| "n/a".to_string(), |sd| format!("{sd:.2}"))
    }
}

pub fn likert_summary<T: Copy + Into<i64>>(values: &[T]) -> Result<LikertSummary, AssessmentError> {
    if values.is_empty() {
        return Err(AssessmentError::EmptyInput);
    }
    let mut histogram = [0u64; 5];
    for &v in values {
        let v: i64 = v.into();
        if !(1..=5).contains(&v) {
            return Err(AssessmentError::OutOfRange(v));
        }
        histogram[(v - 1) as usize] += 1;
    }
    let n = values.len();
    // Summing from the histogram keeps the mean independent of input order.
    let sum: u64 = histogram.iter().enumerate().map(|(i, c)| (i as u64 + 1) * c).sum();
    let mean = sum as f64 / n as f64;
    let sd = (n >= 2).then(|| {
        let ss: f64 = histogram.iter().enumerate().map(|(i, &c)| c as f64 * (i as f64 + 1.0 - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(LikertSummary { n, mean, sd, histogram })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRate {
    pub attempted_tasks: u64,
    pub solved_tasks: u64,
    pub rate: Ratio,
}

/// A task is attempted with any submission and solved with any solving one.
pub fn completion_rate(submissions: &[Submission]) -> CompletionRate {
    let attempted: BTreeSet<&str> = submissions.iter().map(|s| s.task_id.as_str()).collect();
    let solved: BTreeSet<&str> = submissions.iter().filter(|s| s.solved).map(|s| s.task_id.as_str()).collect();
    let (a, s) = (attempted.len() as u64, solved.len() as u64);
    CompletionRate { attempted_tasks: a, solved_tasks: s, rate: Ratio::new(s, a) }
}

pub const CATEGORY_EMPTY: &str = "Empty";
pub const CATEGORY_OTHER: &str = "Other";

fn fold_words(s: &str) -> Vec<String> {
    s.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Sorts free-text entries into categories by keyword pattern.
///
/// Entries and patterns are lowercased and split on non-alphanumerics. A
/// pattern matches when its words appear consecutively in the entry, each
/// entry word starting with the pattern word, so "for" matches "For loop"
/// and "for-loops". Patterns are tried in order and the first match wins.
/// Counts come back sorted descending, ties by name.
pub fn categorize_free_text(entries: &[String], category_map: &[(String, String)]) -> Vec<(String, u64)> {
    let patterns: Vec<(Vec<String>, &str)> =
        category_map.iter().map(|(p, c)| (fold_words(p), c.as_str())).filter(|(p, _)| !p.is_empty()).collect();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for entry in entries {
        let words = fold_words(entry);
        let category = if words.is_empty() {
            CATEGORY_EMPTY
        } else {
            patterns
                .iter()
                .find(|(p, _)| words.windows(p.len()).any(|w| w.iter().zip(p).all(|(e, p)| e.starts_with(p.as_str()))))
                .map_or(CATEGORY_OTHER, |(_, c)| c)
        };
        *counts.entry(category.to_string()).or_default() += 1;
    }
    let mut out: Vec<(String, u64)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_formatting() {
        assert_eq!(Ratio::new(179, 200).display_percent(), "89.5%");
        assert_eq!(Ratio::new(158, 185).display_percent(), "85.4%");
        assert_eq!(Ratio::new(200, 200).display_percent(), "100%");
        assert_eq!(Ratio::new(0, 0).display_percent(), "n/a");
        assert_eq!(Ratio::new(0, 7).display_percent(), "0.0%");
        // 1/8 = 12.5 exactly, 1/16 = 6.25 rounds half up
        assert_eq!(Ratio::new(1, 16).display_percent(), "6.3%");
        assert_eq!(Ratio::new(78, 98).display_percent(), "79.6%");
    }

    #[test]
    fn ratio_serializes_with_percent() {
        let v = serde_json::to_value(Ratio::new(1, 2)).unwrap();
        assert_eq!(v, serde_json::json!({"numerator": 1, "denominator": 2, "percent": "50.0%"}));
        let back: Ratio = serde_json::from_value(v).unwrap();
        assert_eq!(back, Ratio::new(1, 2));
    }

    #[test]
    fn agreement_examples() {
        assert_eq!(percent_agreement(&[(true, true), (false, false)]).unwrap(), 1.0);
        assert_eq!(percent_agreement(&[(true, false), (true, true)]).unwrap(), 0.5);
        assert_eq!(percent_agreement(&[]), Err(AssessmentError::EmptyInput));

        let s = gwet_ac1(&[(true, true), (false, false)]).unwrap();
        assert_eq!((s.pa, s.pi_hat, s.pe, s.ac1), (1.0, 0.5, 0.5, 1.0));
        let s = gwet_ac1(&[(true, true), (true, false), (false, false), (true, true)]).unwrap();
        assert_eq!(s.pi_hat, 0.625);
        assert!((s.pe - 0.46875).abs() < 1e-15);
        assert!((s.ac1 - 0.28125 / 0.53125).abs() < 1e-12);
        let s = gwet_ac1(&[(true, true); 5]).unwrap();
        assert_eq!((s.pe, s.ac1), (0.0, 1.0));
        assert!(gwet_ac1(&[]).is_err());
    }

    #[test]
    fn likert_examples() {
        let s = likert_summary(&[4u8, 4, 4]).unwrap();
        assert_eq!((s.display_mean(), s.display_sd()), ("4.00".into(), "0.00".into()));
        let s = likert_summary(&[5u8, 4, 5, 3]).unwrap();
        assert_eq!((s.display_mean(), s.display_sd()), ("4.25".into(), "0.96".into()));
        assert_eq!(s.histogram, [0, 0, 1, 1, 2]);
        let s = likert_summary(&[1u8]).unwrap();
        assert_eq!((s.display_mean(), s.display_sd()), ("1.00".into(), "n/a".into()));
        assert_eq!(likert_summary::<u8>(&[]), Err(AssessmentError::EmptyInput));
        assert_eq!(likert_summary(&[3u8, 6]), Err(AssessmentError::OutOfRange(6)));
        assert_eq!(likert_summary(&[0i64]), Err(AssessmentError::OutOfRange(0)));
    }

    fn sub(task: &str, solved: bool) -> Submission {
        let outcome = crate::domain::ExecutionOutcome {
            compile_ok: true,
            tests: vec![crate::domain::TestResult { name: "t".into(), passed: solved, message: String::new() }],
            stdout: String::new(),
            stderr: String::new(),
            timed_out: false,
            wall_time_ms: 1,
        };
        Submission::new(task, "", outcome, chrono::Utc::now())
    }

    #[test]
    fn completion_any_success() {
        let r = completion_rate(&[sub("a", false), sub("a", true)]);
        assert_eq!((r.attempted_tasks, r.solved_tasks), (1, 1));
        let r = completion_rate(&[sub("a", false), sub("b", true), sub("b", false)]);
        assert_eq!(r.rate, Ratio::new(1, 2));
        assert_eq!(completion_rate(&[]).rate.display_percent(), "n/a");
    }

    fn map(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn categorization_examples() {
        let sports = map(&[("soccer", "Sports"), ("basketball", "Sports")]);
        assert_eq!(
            categorize_free_text(&strings(&["", "soccer", "basketball"]), &sports),
            vec![("Sports".to_string(), 2), ("Empty".to_string(), 1)]
        );
        assert_eq!(categorize_free_text(&strings(&["lambda notation"]), &sports), vec![("Other".to_string(), 1)]);
        let loops = map(&[("for", "For Loops")]);
        assert_eq!(
            categorize_free_text(&strings(&["For loop", "for-loops"]), &loops),
            vec![("For Loops".to_string(), 2)]
        );
        // "for" is a word prefix, not a substring match
        assert_eq!(categorize_free_text(&strings(&["platform"]), &loops), vec![("Other".to_string(), 1)]);
        let first_wins = map(&[("while loop", "While"), ("loop", "Loops")]);
        assert_eq!(categorize_free_text(&strings(&["While-Loops"]), &first_wins), vec![("While".to_string(), 1)]);
        assert_eq!(categorize_free_text(&strings(&["   "]), &first_wins), vec![("Empty".to_string(), 1)]);
    }
}
