//! Lenient extraction of JSON objects from chat-model output.
//!
//! Models wrap JSON in markdown fences, echo the `//` comments of the schema
//! they were shown, leave trailing commas, and frequently answer with a Python
//! dict literal (`'key': True`). The repair pass handles exactly those cases;
//! anything else is left to `serde_json` to reject.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JsonFixError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("JSON-like block found but could not be parsed: {0}")]
    Malformed(String),
}

/// A fenced markdown code block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock {
    pub lang: String,
    pub body: String,
}

/// Returns every ```-fenced block in order. An unterminated final fence runs to
/// the end of the text.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let (lang, body_start) = match after.find('\n') {
            Some(nl) => (after[..nl].trim().to_string(), nl + 1),
            None => break,
        };
        let body_region = &after[body_start..];
        match find_closing_fence(body_region) {
            Some(end) => {
                blocks.push(FencedBlock {
                    lang,
                    body: body_region[..end].to_string(),
                });
                let consumed = end + 3;
                rest = &body_region[consumed.min(body_region.len())..];
            }
            None => {
                blocks.push(FencedBlock {
                    lang,
                    body: body_region.to_string(),
                });
                break;
            }
        }
    }
    blocks
}

// A closing fence is ``` at the start of a line.
fn find_closing_fence(s: &str) -> Option<usize> {
    let mut offset = 0;
    for line in s.split_inclusive('\n') {
        if line.trim_start().starts_with("```") {
            return Some(offset + (line.len() - line.trim_start().len()));
        }
        offset += line.len();
    }
    None
}

/// Balanced `{...}` spans (top level only) found by scanning the text, with
/// string literals of either quote style respected.
pub fn balanced_objects(text: &str) -> Vec<&str> {
    balanced_spans(text, b'{', b'}')
}

/// Balanced `[...]` spans at top level.
pub fn balanced_arrays(text: &str) -> Vec<&str> {
    balanced_spans(text, b'[', b']')
}

fn balanced_spans(text: &str, open: u8, close: u8) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != open {
            i += 1;
            continue;
        }
        let start = i;
        let mut depth = 0usize;
        let mut quote: Option<u8> = None;
        let mut j = i;
        let mut end = None;
        while j < bytes.len() {
            let b = bytes[j];
            match quote {
                Some(q) => {
                    if b == b'\\' {
                        j += 1;
                    } else if b == q || (b == b'\n' && q == b'\'') {
                        quote = None;
                    }
                }
                None => {
                    if b == b'"' || (b == b'\'' && !is_apostrophe(bytes, j)) {
                        quote = Some(b);
                    } else if b == open {
                        depth += 1;
                    } else if b == close {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(j);
                            break;
                        }
                    }
                }
            }
            j += 1;
        }
        match end {
            Some(e) => {
                spans.push(&text[start..=e]);
                i = e + 1;
            }
            None => i = start + 1,
        }
    }
    spans
}

// A quote between two word characters ("it's") is prose, not a string opener.
fn is_apostrophe(bytes: &[u8], i: usize) -> bool {
    i > 0
        && i + 1 < bytes.len()
        && bytes[i - 1].is_ascii_alphanumeric()
        && bytes[i + 1].is_ascii_alphanumeric()
}

/// Rewrites a JSON-ish / Python-literal snippet into strict JSON.
///
/// Handles `//` line comments, trailing commas, single-quoted strings, and the
/// bare words `True`, `False`, `None`.
pub fn repair(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' => {
                out.push('"');
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    if d == '\\' && i + 1 < chars.len() {
                        out.push(d);
                        out.push(chars[i + 1]);
                        i += 2;
                        continue;
                    }
                    if d == '\n' {
                        out.push_str("\\n");
                        i += 1;
                        continue;
                    }
                    out.push(d);
                    i += 1;
                    if d == '"' {
                        break;
                    }
                }
            }
            '\'' => {
                out.push('"');
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    if d == '\\' && i + 1 < chars.len() {
                        let e = chars[i + 1];
                        if e == '\'' {
                            out.push('\'');
                        } else {
                            out.push('\\');
                            out.push(e);
                        }
                        i += 2;
                        continue;
                    }
                    i += 1;
                    match d {
                        '\'' => break,
                        '"' => out.push_str("\\\""),
                        '\n' => out.push_str("\\n"),
                        _ => out.push(d),
                    }
                }
                out.push('"');
            }
            '/' if chars.get(i + 1) == Some(&'/') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            ',' => {
                let mut k = i + 1;
                loop {
                    while k < chars.len() && chars[k].is_whitespace() {
                        k += 1;
                    }
                    if chars.get(k) == Some(&'/') && chars.get(k + 1) == Some(&'/') {
                        while k < chars.len() && chars[k] != '\n' {
                            k += 1;
                        }
                        continue;
                    }
                    break;
                }
                if !matches!(chars.get(k), Some('}') | Some(']')) {
                    out.push(',');
                }
                i += 1;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push_str(match word.as_str() {
                    "True" => "true",
                    "False" => "false",
                    "None" => "null",
                    other => other,
                });
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

/// Candidate JSON snippets in preference order: fenced blocks first (their
/// own balanced objects, in order), then balanced objects in the bare text.
pub fn json_candidates(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for block in fenced_blocks(text) {
        for obj in balanced_objects(&block.body) {
            out.push(obj.to_string());
        }
    }
    for obj in balanced_objects(text) {
        let s = obj.to_string();
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Parses the first JSON object in `text` that survives repair.
pub fn parse_first_object(text: &str) -> Result<Value, JsonFixError> {
    let candidates = json_candidates(text);
    if candidates.is_empty() {
        return Err(JsonFixError::NoJsonFound);
    }
    let mut last_err = String::new();
    for cand in &candidates {
        match serde_json::from_str::<Value>(&repair(cand)) {
            Ok(v @ Value::Object(_)) => return Ok(v),
            Ok(_) => {}
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(JsonFixError::Malformed(last_err))
}

/// Parses a single snippet (already isolated) after repair.
pub fn parse_snippet(snippet: &str) -> Result<Value, JsonFixError> {
    serde_json::from_str(&repair(snippet)).map_err(|e| JsonFixError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strips_fences_comments_and_trailing_commas() {
        let text = "Here you go:\n```json\n{\n  \"a\": \"x\", // note\n  \"b\": [1, 2,],\n}\n```\n";
        assert_eq!(parse_first_object(text).unwrap(), json!({"a": "x", "b": [1, 2]}));
    }

    #[test]
    fn python_dict_literal() {
        let text = "{'k': 'it\\'s', 'flag': True, 'n': None, 'q': \"Physionet's data\"}";
        assert_eq!(
            parse_first_object(text).unwrap(),
            json!({"k": "it's", "flag": true, "n": null, "q": "Physionet's data"})
        );
    }

    #[test]
    fn comment_markers_inside_strings_survive() {
        let text = r#"{"url": "http://example.com", "b": 1}"#;
        assert_eq!(parse_first_object(text).unwrap()["url"], "http://example.com");
    }

    #[test]
    fn no_object() {
        assert_eq!(parse_first_object("nothing here"), Err(JsonFixError::NoJsonFound));
    }

    #[test]
    fn garbage_object_is_malformed() {
        assert!(matches!(
            parse_first_object("{ this is : not json }"),
            Err(JsonFixError::Malformed(_))
        ));
    }

    #[test]
    fn fenced_blocks_in_order() {
        let text = "a\n```python\nx = 1\n```\nb\n```\ny\n```";
        let blocks = fenced_blocks(text);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].lang, "python");
        assert_eq!(blocks[0].body, "x = 1\n");
        assert_eq!(blocks[1].body, "y\n");
    }

    #[test]
    fn apostrophes_in_prose_do_not_unbalance() {
        let text = "Here's the config: {\"a\": 1} and it's done";
        assert_eq!(balanced_objects(text), vec!["{\"a\": 1}"]);
    }
}
