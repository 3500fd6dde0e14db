//! Prompt templates and rendering.
//!
//! One template per pipeline component. A template file holds `key: value`
//! front-matter lines (`component`, `preamble`, `few_shot`), a `---` line,
//! and the body. `preamble` names a text file; `few_shot` names a
//! comma-separated list of example files, each split into an
//! `=== input ===` part and an `=== output ===` part.
//!
//! Student-supplied text is only ever placed between
//! [`USER_INPUT_OPEN`] and [`USER_INPUT_CLOSE`] on a single line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::GenerationRequest;

pub const USER_INPUT_OPEN: &str = "<<<USER_INPUT>>>";
pub const USER_INPUT_CLOSE: &str = "<<<END_USER_INPUT>>>";

const UNSPECIFIED_CONCEPTS: &str = "(unspecified: choose one suitable introductory programming concept)";
const UNSPECIFIED_CONTEXT: &str = "(unspecified: choose a neutral everyday context)";

/// Pipeline components in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Description,
    Skeleton,
    Tests,
    Solution,
    Reflection,
}

impl Component {
    pub const ALL: [Component; 5] =
        [Component::Description, Component::Skeleton, Component::Tests, Component::Solution, Component::Reflection];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Description => "description",
            Component::Skeleton => "skeleton",
            Component::Tests => "tests",
            Component::Solution => "solution",
            Component::Reflection => "reflection",
        }
    }

    /// Placeholders whose values exist by the time this component renders.
    pub fn available(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            Component::Description => &[Language, Concepts, Context],
            Component::Skeleton => &[Language, Concepts, Context, Description],
            Component::Tests => &[Language, Concepts, Context, Description, Skeleton],
            Component::Solution => &[Language, Concepts, Context, Description, Skeleton, Tests],
            Component::Reflection => {
                &[Language, Concepts, Context, Description, Skeleton, Tests, Solution, CompilerOutput, TestResults]
            }
        }
    }

    fn revision_instruction(self) -> Option<&'static str> {
        match self {
            Component::Tests => Some("Revise the unit tests. Return the complete corrected unit tests only."),
            Component::Solution => {
                Some("Revise the model solution. Return the complete corrected model solution only.")
            }
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| PromptError::Template(format!("unknown component `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    Language,
    Concepts,
    Context,
    Description,
    Skeleton,
    Tests,
    Solution,
    CompilerOutput,
    TestResults,
}

impl Placeholder {
    const ALL: [Placeholder; 9] = [
        Placeholder::Language,
        Placeholder::Concepts,
        Placeholder::Context,
        Placeholder::Description,
        Placeholder::Skeleton,
        Placeholder::Tests,
        Placeholder::Solution,
        Placeholder::CompilerOutput,
        Placeholder::TestResults,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Language => "language",
            Placeholder::Concepts => "concepts",
            Placeholder::Context => "context",
            Placeholder::Description => "description",
            Placeholder::Skeleton => "skeleton",
            Placeholder::Tests => "tests",
            Placeholder::Solution => "solution",
            Placeholder::CompilerOutput => "compiler_output",
            Placeholder::TestResults => "test_results",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Placeholder::ALL.into_iter().find(|p| p.name() == name)
    }

    fn is_user_input(self) -> bool {
        matches!(self, Placeholder::Language | Placeholder::Concepts | Placeholder::Context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Chat-style model input. Always non-empty and led by a system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptMessages(Vec<Message>);

impl PromptMessages {
    pub fn new(messages: Vec<Message>) -> Result<Self, PromptError> {
        match messages.first() {
            Some(m) if m.role == Role::System => Ok(Self(messages)),
            _ => Err(PromptError::Template("prompt must start with a system message".into())),
        }
    }

    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    pub fn final_user_message(&self) -> &str {
        self.0.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("missing value for placeholder `{0}`")]
    MissingPlaceholder(String),
    #[error("{component} template references `{placeholder}`, which is not available at that stage")]
    StageViolation { component: Component, placeholder: String },
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub component: Component,
    pub system_preamble: String,
    pub few_shot_examples: Vec<(String, String)>,
    pub body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(
        component: Component,
        system_preamble: impl Into<String>,
        few_shot_examples: Vec<(String, String)>,
        body: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let body = body.into();
        let segments = parse_body(&body)?;
        for seg in &segments {
            if let Segment::Slot(p) = seg {
                if !component.available().contains(p) {
                    return Err(PromptError::StageViolation { component, placeholder: p.name().into() });
                }
            }
        }
        Ok(Self { component, system_preamble: system_preamble.into(), few_shot_examples, body, segments })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = Placeholder> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(p) => Some(*p),
            Segment::Text(_) => None,
        })
    }

    pub fn references(&self, p: Placeholder) -> bool {
        self.placeholders().any(|q| q == p)
    }

    fn fill(&self, request: &GenerationRequest, prior: &BTreeMap<Placeholder, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(p) if p.is_user_input() => out.push_str(&request_value(*p, request)),
                Segment::Slot(p) => {
                    let v = prior.get(p).ok_or_else(|| PromptError::MissingPlaceholder(p.name().into()))?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

fn parse_body(body: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| PromptError::Template("unterminated `{{` in template body".into()))?;
        let name = after[..end].trim();
        let p = Placeholder::from_name(name)
            .ok_or_else(|| PromptError::Template(format!("unknown placeholder `{{{{{name}}}}}`")))?;
        if start > 0 {
            segments.push(Segment::Text(rest[..start].to_string()));
        }
        segments.push(Segment::Slot(p));
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        segments.push(Segment::Text(rest.to_string()));
    }
    Ok(segments)
}

/// Escapes runs of three or more `<` or `>` so no sentinel can be formed,
/// and flattens line breaks so the text stays on its delimited line.
pub fn escape_user_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut run_char = '\0';
    let mut run = 0usize;
    for ch in s.chars() {
        let ch = if matches!(ch, '\n' | '\r' | '\u{2028}' | '\u{2029}') { ' ' } else { ch };
        if ch == '<' || ch == '>' {
            if ch == run_char {
                run += 1;
            } else {
                run_char = ch;
                run = 1;
            }
            if run == 3 {
                out.push('\\');
                run = 1;
            }
        } else {
            run_char = '\0';
            run = 0;
        }
        out.push(ch);
    }
    out
}

pub fn delimit_user_text(s: &str) -> String {
    format!("{USER_INPUT_OPEN}{}{USER_INPUT_CLOSE}", escape_user_text(s))
}

fn request_value(p: Placeholder, request: &GenerationRequest) -> String {
    match p {
        Placeholder::Language => language_name(&request.teaching_language),
        Placeholder::Concepts if request.concepts.is_empty() => UNSPECIFIED_CONCEPTS.into(),
        Placeholder::Concepts => {
            request.concepts.iter().map(|c| format!("- {}", delimit_user_text(c))).collect::<Vec<_>>().join("\n")
        }
        Placeholder::Context if request.context.is_empty() => UNSPECIFIED_CONTEXT.into(),
        Placeholder::Context => delimit_user_text(&request.context),
        _ => unreachable!("not a request placeholder"),
    }
}

fn language_name(tag: &str) -> String {
    match tag.trim().to_ascii_lowercase().as_str() {
        "" | "python" | "python3" | "py" => "Python".into(),
        "java" => "Java".into(),
        "javascript" | "js" => "JavaScript".into(),
        _ => tag.trim().chars().filter(|c| c.is_alphanumeric() || matches!(c, '+' | '#' | ' ' | '-')).collect(),
    }
}

/// The five component templates, validated against the stage order.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<Component, PromptTemplate>,
}

const DEFAULT_FILES: &[(&str, &str)] = &[
    ("description.prompt", include_str!("../templates/description.prompt")),
    ("description.preamble.txt", include_str!("../templates/description.preamble.txt")),
    ("description.example.txt", include_str!("../templates/description.example.txt")),
    ("skeleton.prompt", include_str!("../templates/skeleton.prompt")),
    ("skeleton.example.txt", include_str!("../templates/skeleton.example.txt")),
    ("tests.prompt", include_str!("../templates/tests.prompt")),
    ("tests.example.txt", include_str!("../templates/tests.example.txt")),
    ("solution.prompt", include_str!("../templates/solution.prompt")),
    ("solution.example.txt", include_str!("../templates/solution.example.txt")),
    ("reflection.prompt", include_str!("../templates/reflection.prompt")),
    ("code.preamble.txt", include_str!("../templates/code.preamble.txt")),
];

impl TemplateSet {
    pub fn new(templates: impl IntoIterator<Item = PromptTemplate>) -> Result<Self, PromptError> {
        let templates: BTreeMap<_, _> = templates.into_iter().map(|t| (t.component, t)).collect();
        for c in Component::ALL {
            if !templates.contains_key(&c) {
                return Err(PromptError::Template(format!("no template for component `{c}`")));
            }
        }
        Ok(Self { templates })
    }

    /// The built-in templates.
    pub fn defaults() -> Self {
        let lookup = |name: &str| {
            DEFAULT_FILES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, body)| (*body).to_string())
                .ok_or_else(|| PromptError::Template(format!("missing built-in file {name}")))
        };
        Self::from_source(lookup).expect("built-in templates are valid")
    }

    /// Loads `<component>.prompt` files (and the files they reference) from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::from_source(|name| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| PromptError::Template(format!("reading {}: {e}", dir.join(name).display())))
        })
    }

    /// Writes the built-in template files into `dir`.
    pub fn export_defaults(dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in DEFAULT_FILES {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }

    fn from_source(read: impl Fn(&str) -> Result<String, PromptError>) -> Result<Self, PromptError> {
        let mut templates = Vec::new();
        for c in Component::ALL {
            let text = read(&format!("{c}.prompt"))?;
            templates.push(parse_template_file(c, &text, &read)?);
        }
        Self::new(templates)
    }

    pub fn get(&self, c: Component) -> &PromptTemplate {
        &self.templates[&c]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Component, &PromptTemplate)> {
        self.templates.iter()
    }

    /// Renders one component prompt: system preamble, few-shot pairs as
    /// user/assistant turns, then the filled body as the final user turn.
    pub fn render(
        &self,
        component: Component,
        request: &GenerationRequest,
        prior: &BTreeMap<Placeholder, String>,
    ) -> Result<PromptMessages, PromptError> {
        let t = self.get(component);
        let mut messages = vec![Message { role: Role::System, content: t.system_preamble.trim_end().to_string() }];
        for (input, output) in &t.few_shot_examples {
            messages.push(Message { role: Role::User, content: input.clone() });
            messages.push(Message { role: Role::Assistant, content: output.clone() });
        }
        messages.push(Message { role: Role::User, content: t.fill(request, prior)? });
        PromptMessages::new(messages)
    }

    /// Prompt asking for a corrected version of `target` (tests or solution):
    /// the target's own prompt, its previous answer, then the reflection
    /// feedback followed by a revision instruction.
    pub fn render_revision(
        &self,
        target: Component,
        request: &GenerationRequest,
        prior: &BTreeMap<Placeholder, String>,
        previous_output: &str,
    ) -> Result<PromptMessages, PromptError> {
        let instruction = target
            .revision_instruction()
            .ok_or_else(|| PromptError::Template(format!("component `{target}` cannot be revised")))?;
        let mut messages = self.render(target, request, prior)?.0;
        let feedback = self.get(Component::Reflection).fill(request, prior)?;
        messages.push(Message { role: Role::Assistant, content: previous_output.to_string() });
        messages.push(Message { role: Role::User, content: format!("{}\n\n{instruction}", feedback.trim_end()) });
        PromptMessages::new(messages)
    }
}

fn parse_template_file(
    expected: Component,
    text: &str,
    read: &impl Fn(&str) -> Result<String, PromptError>,
) -> Result<PromptTemplate, PromptError> {
    let (front, body) = split_front_matter(text)
        .ok_or_else(|| PromptError::Template(format!("{expected}.prompt: missing `---` separator")))?;
    let mut component = None;
    let mut preamble = String::new();
    let mut few_shot = Vec::new();
    for line in front.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| PromptError::Template(format!("{expected}.prompt: bad front-matter line `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "component" => component = Some(value.parse::<Component>()?),
            "preamble" => preamble = read(value)?,
            "few_shot" => {
                for file in value.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                    few_shot.push(parse_example(file, &read(file)?)?);
                }
            }
            other => return Err(PromptError::Template(format!("{expected}.prompt: unknown key `{other}`"))),
        }
    }
    if component.is_some_and(|c| c != expected) {
        return Err(PromptError::Template(format!("{expected}.prompt declares a different component")));
    }
    PromptTemplate::new(expected, preamble, few_shot, body.trim_end().to_string())
}

fn split_front_matter(text: &str) -> Option<(&str, &str)> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.trim_end() == "---" {
            return Some((&text[..offset], &text[offset + line.len()..]));
        }
        offset += line.len();
    }
    None
}

fn parse_example(name: &str, text: &str) -> Result<(String, String), PromptError> {
    let bad = || PromptError::Template(format!("{name}: expected `=== input ===` and `=== output ===` sections"));
    let rest = text.trim_start().strip_prefix("=== input ===").ok_or_else(bad)?;
    let (input, output) = rest.split_once("=== output ===").ok_or_else(bad)?;
    Ok((input.trim().to_string(), output.trim().to_string()))
}
