//! Markdown fence stripping for model-produced source text.

fn is_fence_open(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

// A closing fence is a line made only of backticks (at least three).
fn is_fence_close(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 3 && t.bytes().all(|b| b == b'`')
}

/// Returns the interiors of all complete fenced blocks, joined in order by
/// a newline. Text without a complete fenced block comes back unchanged.
///
/// Interiors never contain a bare backtick line, so the result has no
/// complete block of its own and a second pass is the identity.
pub fn sanitize_source(text: &str) -> String {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        match current.as_mut() {
            Some(body) => {
                if is_fence_close(line) {
                    blocks.push(current.take().unwrap_or_default());
                } else {
                    body.push(line);
                }
            }
            None => {
                if is_fence_open(line) {
                    current = Some(Vec::new());
                }
            }
        }
    }
    if blocks.is_empty() {
        return text.to_string();
    }
    blocks.into_iter().map(|b| b.join("\n")).collect::<Vec<_>>().join("\n")
}
