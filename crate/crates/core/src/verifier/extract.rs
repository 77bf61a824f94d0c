//! Final-answer extraction from free-form reasoning text.

/// Splits `text` into (outside, inside) `<think>` material.
///
/// An unclosed `<think>` runs to the end of the text; a `</think>` with no
/// opening tag closes a span that started at the beginning of the text.
pub(crate) fn split_think(text: &str) -> (String, String) {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    let mut outside = String::new();
    let mut inside = String::new();
    let mut rest = text;

    // leading span closed without an opening tag
    if let Some(close) = rest.find(CLOSE) {
        if rest[..close].find(OPEN).is_none() {
            inside.push_str(&rest[..close]);
            rest = &rest[close + CLOSE.len()..];
        }
    }

    loop {
        match rest.find(OPEN) {
            None => {
                outside.push_str(rest);
                break;
            }
            Some(open) => {
                outside.push_str(&rest[..open]);
                outside.push('\n');
                let body = &rest[open + OPEN.len()..];
                match body.find(CLOSE) {
                    None => {
                        inside.push_str(body);
                        break;
                    }
                    Some(close) => {
                        inside.push_str(&body[..close]);
                        inside.push('\n');
                        rest = &body[close + CLOSE.len()..];
                    }
                }
            }
        }
    }
    (outside, inside)
}

/// Content of the last `\boxed{...}` whose braces balance. Nested boxes are
/// unwrapped to the innermost one.
pub(crate) fn last_boxed(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed";
    let mut found = None;
    let mut rest = text;
    while let Some(start) = rest.find(MARKER) {
        let after_marker = &rest[start + MARKER.len()..];
        let after = after_marker.trim_start();
        let balanced = after
            .strip_prefix('{')
            .and_then(|body| balanced_prefix(body).map(|content| (body, content)));
        match balanced {
            Some((body, content)) => {
                found = Some(content);
                // skip past the closing brace so nested markers are not
                // mistaken for later top-level ones
                rest = &body[content.len() + 1..];
            }
            None => rest = after_marker,
        }
    }
    found.map(|content| unwrap_boxed(content.trim()).to_string())
}

/// Strips `\boxed{...}` wrappers that span the whole of `content`.
fn unwrap_boxed(mut content: &str) -> &str {
    while let Some(after) = content.strip_prefix("\\boxed") {
        let Some(body) = after.trim_start().strip_prefix('{') else {
            break;
        };
        match balanced_prefix(body) {
            Some(inner) if body[inner.len() + 1..].trim().is_empty() => content = inner.trim(),
            _ => break,
        }
    }
    content
}

/// Given text just after an opening brace, returns the content up to the
/// matching closing brace.
fn balanced_prefix(body: &str) -> Option<&str> {
    let mut depth = 0usize;
    for (i, ch) in body.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' if depth == 0 => return Some(&body[..i]),
            '}' => depth -= 1,
            _ => {}
        }
    }
    None
}

/// Remainder of the line after the last occurrence of any cue, matched
/// ASCII-case-insensitively.
pub(crate) fn after_last_cue(text: &str, cues: &[String]) -> Option<String> {
    let folded = text.to_ascii_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for cue in cues {
        let cue = cue.to_ascii_lowercase();
        if cue.is_empty() {
            continue;
        }
        if let Some(pos) = folded.rfind(&cue) {
            let end = pos + cue.len();
            if best.is_none_or(|(p, e)| pos > p || (pos == p && end > e)) {
                best = Some((pos, end));
            }
        }
    }
    let (_, end) = best?;
    let line = text[end..].lines().next().unwrap_or("");
    let answer = line
        .trim()
        .trim_start_matches(':')
        .trim()
        .trim_end_matches('.')
        .trim()
        .trim_matches('*')
        .trim();
    (!answer.is_empty()).then(|| answer.to_string())
}

pub(crate) fn extract_from(text: &str, cues: &[String]) -> Option<String> {
    last_boxed(text).or_else(|| after_last_cue(text, cues))
}
