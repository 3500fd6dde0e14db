use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{CompletionProvider, ComponentModelConfig, GatewayError, ProviderReply};
use crate::prompt::PromptMessages;

/// One scripted answer, used when `matcher` is a substring of the final user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: String,
    pub response: String,
}

impl ScriptEntry {
    pub fn new(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: matcher.into(), response: response.into() }
    }
}

/// Deterministic provider that serves a fixed script.
///
/// Each call consumes the first unconsumed matching entry. Consumption is
/// serialized internally, so call-order determinism holds only when the
/// caller serializes its calls.
pub struct ScriptedProvider {
    entries: Mutex<Vec<(ScriptEntry, bool)>>,
}

impl ScriptedProvider {
    pub fn new(script: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        if script.is_empty() {
            return Err(GatewayError::Config("script must not be empty".into()));
        }
        Ok(Self { entries: Mutex::new(script.into_iter().map(|e| (e, false)).collect()) })
    }

    /// Loads a JSON array of `{"match": ..., "response": ...}` objects.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading script {}: {e}", path.display())))?;
        let script: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("script {}: {e}", path.display())))?;
        Self::new(script)
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).iter().filter(|(_, used)| !used).count()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, messages: &PromptMessages, _cfg: &ComponentModelConfig) -> Result<ProviderReply, GatewayError> {
        let prompt = messages.final_user_message();
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        let (entry, used) = entries
            .iter_mut()
            .find(|(e, used)| !*used && prompt.contains(&e.matcher))
            .ok_or(GatewayError::ScriptExhausted)?;
        *used = true;
        Ok(ProviderReply { text: entry.response.clone(), attempts: 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{Message, Role};

    fn prompt(text: &str) -> PromptMessages {
        PromptMessages::new(vec![
            Message { role: Role::System, content: "sys".into() },
            Message { role: Role::User, content: text.into() },
        ])
        .unwrap()
    }

    fn call(p: &ScriptedProvider, text: &str) -> Result<String, GatewayError> {
        p.complete(&prompt(text), &ComponentModelConfig::default()).map(|r| r.text)
    }

    #[test]
    fn returns_scripted_text_verbatim() {
        let p = ScriptedProvider::new(vec![ScriptEntry::new("", "def f():\n    return 1")]).unwrap();
        assert_eq!(call(&p, "anything").unwrap(), "def f():\n    return 1");
    }

    #[test]
    fn matches_by_substring() {
        let p = ScriptedProvider::new(vec![ScriptEntry::new("recursion", "SOLUTION_A")]).unwrap();
        assert_eq!(call(&p, "a task about recursion").unwrap(), "SOLUTION_A");
    }

    #[test]
    fn consumes_in_order() {
        let p = ScriptedProvider::new(vec![ScriptEntry::new("x", "one"), ScriptEntry::new("x", "two")]).unwrap();
        assert_eq!(call(&p, "x").unwrap(), "one");
        assert_eq!(call(&p, "x").unwrap(), "two");
        assert!(matches!(call(&p, "x"), Err(GatewayError::ScriptExhausted)));
    }

    #[test]
    fn no_match_is_exhaustion() {
        let p = ScriptedProvider::new(vec![ScriptEntry::new("lists", "L")]).unwrap();
        assert!(matches!(call(&p, "tuples"), Err(GatewayError::ScriptExhausted)));
        assert_eq!(p.remaining(), 1);
    }

    #[test]
    fn only_final_user_message_is_matched() {
        let msgs = PromptMessages::new(vec![
            Message { role: Role::System, content: "recursion".into() },
            Message { role: Role::User, content: "recursion".into() },
            Message { role: Role::Assistant, content: "ok".into() },
            Message { role: Role::User, content: "lists".into() },
        ])
        .unwrap();
        let p = ScriptedProvider::new(vec![ScriptEntry::new("recursion", "R")]).unwrap();
        assert!(p.complete(&msgs, &ComponentModelConfig::default()).is_err());
    }

    #[test]
    fn empty_script_is_rejected() {
        assert!(ScriptedProvider::new(vec![]).is_err());
    }

    #[test]
    fn script_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(&path, r#"[{"match": "a", "response": "b"}]"#).unwrap();
        let p = ScriptedProvider::from_file(&path).unwrap();
        assert_eq!(call(&p, "a").unwrap(), "b");
    }
}
