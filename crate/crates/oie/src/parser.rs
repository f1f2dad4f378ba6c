//! Parsing model responses into triplets and formatting triplets back.
//!
//! The response grammar: one triplet per line, `N. (subject, predicate, object)`,
//! where the `N.`/`N)` prefix is optional and the object absorbs any commas
//! after the second one. Lines that do not match are skipped with a warning;
//! parsing never fails.

use thiserror::Error;

use crate::corpus::{normalize_text, Triplet};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("degenerate triplet: field {field:?} normalizes to nothing")]
    DegenerateField { field: String },
}

/// Separator between normalized fields inside a canonical key.
/// Unit separator: cannot survive `normalize_text`, so keys are unambiguous.
const KEY_SEP: char = '\u{1f}';

/// Canonical identity of a triplet: normalized tokens of each field joined by
/// spaces, fields joined by a reserved separator. Equal keys define triplet
/// equality everywhere (uncertainty counting, deduplication, exact matching).
pub fn canonical_key(t: &Triplet) -> Result<String, ParseError> {
    for field in t.fields() {
        if normalize_text(field).is_empty() {
            return Err(ParseError::DegenerateField {
                field: field.to_string(),
            });
        }
    }
    Ok(raw_key(t))
}

/// Infallible variant of [`canonical_key`]: degenerate fields map to the empty
/// token string instead of erroring. Used for internal dedup and sorting.
pub fn raw_key(t: &Triplet) -> String {
    t.fields()
        .map(|f| normalize_text(f).join(" "))
        .join(&KEY_SEP.to_string())
}

/// Render one triplet as a numbered response line.
pub fn format_triplet(t: &Triplet, index: usize) -> String {
    format!("{index}. {t}")
}

/// Scan a free-text response line by line and collect triplets.
///
/// Returns the (deduplicated) triplets plus one warning per skipped line.
pub fn parse_response(text: &str) -> (Vec<Triplet>, Vec<String>) {
    let mut triplets = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_line(trimmed) {
            Ok(t) => {
                if seen.insert(raw_key(&t)) {
                    triplets.push(t);
                }
            }
            Err(reason) => warnings.push(format!("line {line_no}: {reason}")),
        }
    }
    (triplets, warnings)
}

fn parse_line(line: &str) -> Result<Triplet, String> {
    let body = strip_index_prefix(line).trim();
    let inner = body
        .strip_prefix('(')
        .and_then(|rest| rest.strip_suffix(')'))
        .ok_or("not a parenthesized triplet")?;
    let (subject, rest) = inner.split_once(',').ok_or("expected 3 fields, found 1")?;
    let (predicate, object) = rest.split_once(',').ok_or("expected 3 fields, found 2")?;
    let subject = subject.trim();
    let predicate = predicate.trim();
    let object = object.trim();
    if subject.is_empty() || predicate.is_empty() || object.is_empty() {
        return Err("empty field".to_string());
    }
    if [subject, predicate, object]
        .iter()
        .any(|f| f.contains('\n'))
    {
        return Err("field contains newline".to_string());
    }
    Ok(Triplet::new(subject, predicate, object))
}

/// Strip an optional leading `N.` or `N)` list index.
fn strip_index_prefix(line: &str) -> &str {
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return line;
    }
    let rest = &line[digits..];
    match rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
        Some(stripped) => stripped,
        None => line,
    }
}
