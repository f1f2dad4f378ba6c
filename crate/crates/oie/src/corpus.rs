//! Benchmark corpora: sentences, gold triplets, loaders, and the shared
//! text normalization used by retrieval, parsing, and scoring.
//!
//! Two input formats are supported:
//! - canonical JSONL: one `{"id", "sentence", "gold": [[s, p, o], ...]}` object
//!   per line; round-trips bit-identically through [`AnnotatedCorpus::to_jsonl`].
//! - benchmark TSV: `sentence \t relation \t arg1 \t arg2 [\t extra...]` rows,
//!   one row per gold tuple, grouped by exact sentence string.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate sentence id {id:?}")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: gold entry has {arity} fields, expected 3")]
    BadArity {
        path: String,
        line: usize,
        arity: usize,
    },
    #[error("{path}:{line}: row has {cols} columns, expected at least 4")]
    ShortRow {
        path: String,
        line: usize,
        cols: usize,
    },
    #[error("empty sentence text{at}")]
    EmptyText { at: String },
}

/// Lowercase, split on Unicode whitespace, strip leading/trailing ASCII
/// punctuation from each token, drop tokens that end up empty.
///
/// This single rule is shared by the canonical triplet key, the lexical
/// matcher, and the tuple matcher so that all equality decisions agree.
pub fn normalize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|tok| !tok.is_empty())
        .map(str::to_string)
        .collect()
}

/// A sentence with its stable id and pre-computed normalized tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let id = id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                at: format!(" (id {id:?})"),
            });
        }
        let tokens = normalize_text(&text);
        Ok(Sentence { id, text, tokens })
    }
}

/// One `(subject, predicate, object)` fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Triplet {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    pub fn fields(&self) -> [&str; 3] {
        [&self.subject, &self.predicate, &self.object]
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.predicate, self.object)
    }
}

/// A sentence together with its gold triplet list (possibly empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    pub gold: Vec<Triplet>,
}

/// An ordered, immutable collection of annotated sentences.
///
/// Iteration order is load order; ids are unique within a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedCorpus {
    pub items: Vec<AnnotatedSentence>,
    /// Provenance label: file path plus format.
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    sentence: String,
    gold: Vec<Vec<String>>,
}

impl AnnotatedCorpus {
    pub fn new(items: Vec<AnnotatedSentence>, source: impl Into<String>) -> Self {
        AnnotatedCorpus {
            items,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedSentence> {
        self.items.iter().find(|a| a.sentence.id == id)
    }

    /// Load the canonical JSONL format.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let contents = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        Self::parse_jsonl(&contents, &path_str)
    }

    pub fn parse_jsonl(contents: &str, source: &str) -> Result<Self, CorpusError> {
        let mut items = Vec::new();
        let mut seen_ids: HashMap<String, usize> = HashMap::new();
        for (idx, line) in contents.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                    path: source.to_string(),
                    line: line_no,
                    reason: e.to_string(),
                })?;
            if seen_ids.insert(rec.id.clone(), line_no).is_some() {
                return Err(CorpusError::DuplicateId {
                    path: source.to_string(),
                    line: line_no,
                    id: rec.id,
                });
            }
            let mut gold = Vec::new();
            for entry in &rec.gold {
                if entry.len() != 3 {
                    return Err(CorpusError::BadArity {
                        path: source.to_string(),
                        line: line_no,
                        arity: entry.len(),
                    });
                }
                gold.push(Triplet::new(&entry[0], &entry[1], &entry[2]));
            }
            let gold = dedup_gold(gold, &rec.id);
            let sentence = Sentence::new(rec.id, rec.sentence).map_err(|_| {
                CorpusError::MalformedLine {
                    path: source.to_string(),
                    line: line_no,
                    reason: "empty sentence text".to_string(),
                }
            })?;
            items.push(AnnotatedSentence { sentence, gold });
        }
        Ok(AnnotatedCorpus::new(items, format!("{source} (jsonl)")))
    }

    /// Import a CaRB-style gold TSV: `sentence \t relation \t arg1 \t arg2`,
    /// with any extra columns folded into the object.
    pub fn load_benchmark_tsv(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let contents = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        Self::parse_benchmark_tsv(&contents, &path_str)
    }

    pub fn parse_benchmark_tsv(contents: &str, source: &str) -> Result<Self, CorpusError> {
        let mut order: Vec<String> = Vec::new();
        let mut by_sentence: HashMap<String, Vec<Triplet>> = HashMap::new();
        for (idx, line) in contents.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                return Err(CorpusError::ShortRow {
                    path: source.to_string(),
                    line: line_no,
                    cols: cols.len(),
                });
            }
            let sentence = cols[0].to_string();
            let relation = cols[1];
            let arg1 = cols[2];
            let object = cols[3..].join(" ");
            if !by_sentence.contains_key(&sentence) {
                order.push(sentence.clone());
            }
            by_sentence
                .entry(sentence)
                .or_default()
                .push(Triplet::new(arg1, relation, object));
        }
        let mut items = Vec::new();
        for (i, text) in order.iter().enumerate() {
            let id = format!("s{i:04}");
            let gold = dedup_gold(by_sentence.remove(text).unwrap(), &id);
            let sentence = Sentence::new(id, text.clone())?;
            items.push(AnnotatedSentence { sentence, gold });
        }
        Ok(AnnotatedCorpus::new(items, format!("{source} (tsv)")))
    }

    /// Serialize to canonical JSONL. Output is bit-identical for equal corpora.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let rec = JsonlRecord {
                id: item.sentence.id.clone(),
                sentence: item.sentence.text.clone(),
                gold: item
                    .gold
                    .iter()
                    .map(|t| {
                        vec![
                            t.subject.clone(),
                            t.predicate.clone(),
                            t.object.clone(),
                        ]
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("jsonl record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Drop gold duplicates that share a canonical key, keeping the first.
fn dedup_gold(gold: Vec<Triplet>, id: &str) -> Vec<Triplet> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(gold.len());
    for t in gold {
        let key = crate::parser::raw_key(&t);
        if seen.insert(key) {
            out.push(t);
        } else {
            log::warn!("dropping duplicate gold triplet {t} in sentence {id}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_strips_punctuation_and_lowercases() {
        assert_eq!(
            normalize_text("The Flemish Region,"),
            vec!["the", "flemish", "region"]
        );
        assert_eq!(normalize_text(""), Vec::<String>::new());
        assert_eq!(
            normalize_text("Who is the author?"),
            vec!["who", "is", "the", "author"]
        );
    }

    #[test]
    fn normalize_is_idempotent_on_joined_output() {
        for text in ["A, b. C!", "  weird\t spacing ", "«quoted» tokens?!"] {
            let once = normalize_text(text);
            let twice = normalize_text(&once.join(" "));
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn jsonl_single_line() {
        let corpus = AnnotatedCorpus::parse_jsonl(
            r#"{"id":"x1","sentence":"A eats B","gold":[["A","eats","B"]]}"#,
            "mem",
        )
        .unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.items[0].gold, vec![Triplet::new("A", "eats", "B")]);
    }

    #[test]
    fn jsonl_empty_file() {
        let corpus = AnnotatedCorpus::parse_jsonl("", "mem").unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn jsonl_bad_arity_is_rejected() {
        let err = AnnotatedCorpus::parse_jsonl(
            r#"{"id":"x1","sentence":"A eats B","gold":[["A","eats"]]}"#,
            "mem",
        )
        .unwrap_err();
        match err {
            CorpusError::BadArity { line, arity, .. } => {
                assert_eq!(line, 1);
                assert_eq!(arity, 2);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn jsonl_duplicate_id_is_rejected() {
        let err = AnnotatedCorpus::parse_jsonl(
            "{\"id\":\"x\",\"sentence\":\"a\",\"gold\":[]}\n{\"id\":\"x\",\"sentence\":\"b\",\"gold\":[]}",
            "mem",
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn jsonl_malformed_line_names_line_number() {
        let err = AnnotatedCorpus::parse_jsonl(
            "{\"id\":\"x\",\"sentence\":\"a\",\"gold\":[]}\nnot json",
            "mem",
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::MalformedLine { line: 2, .. }));
    }

    #[test]
    fn tsv_groups_rows_by_sentence() {
        let corpus = AnnotatedCorpus::parse_benchmark_tsv(
            "S one\trel1\ta\tb\nS one\trel2\ta\tc\nS two\trel\tx\ty",
            "mem",
        )
        .unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.items[0].gold.len(), 2);
        assert_eq!(corpus.items[0].gold[0], Triplet::new("a", "rel1", "b"));
        assert_eq!(corpus.items[1].gold.len(), 1);
    }

    #[test]
    fn tsv_folds_extra_columns_into_object() {
        let corpus =
            AnnotatedCorpus::parse_benchmark_tsv("S\trel\ta1\ta2\ta3", "mem").unwrap();
        assert_eq!(corpus.items[0].gold[0].object, "a2 a3");
    }

    #[test]
    fn tsv_short_row_is_rejected() {
        let err = AnnotatedCorpus::parse_benchmark_tsv("S\trel\ta1", "mem").unwrap_err();
        assert!(matches!(err, CorpusError::ShortRow { cols: 3, .. }));
    }

    #[test]
    fn jsonl_round_trip_preserves_corpus() {
        let src = concat!(
            "{\"id\":\"a\",\"sentence\":\"A eats B, daily\",\"gold\":[[\"A\",\"eats\",\"B\"]]}\n",
            "{\"id\":\"b\",\"sentence\":\"Nothing here\",\"gold\":[]}\n",
        );
        let corpus = AnnotatedCorpus::parse_jsonl(src, "mem").unwrap();
        let dumped = corpus.to_jsonl();
        let reloaded = AnnotatedCorpus::parse_jsonl(&dumped, "mem").unwrap();
        assert_eq!(corpus.items, reloaded.items);
        // Export is stable byte-for-byte.
        assert_eq!(dumped, reloaded.to_jsonl());
    }

    #[test]
    fn gold_duplicates_by_canonical_key_are_dropped() {
        let corpus = AnnotatedCorpus::parse_jsonl(
            r#"{"id":"x","sentence":"s","gold":[["The Cat","ate","a mouse"],["the cat","ATE","a  mouse"]]}"#,
            "mem",
        )
        .unwrap();
        assert_eq!(corpus.items[0].gold.len(), 1);
    }

    #[test]
    fn loading_is_deterministic() {
        let src = "{\"id\":\"a\",\"sentence\":\"x y z\",\"gold\":[[\"x\",\"y\",\"z\"]]}\n";
        let a = AnnotatedCorpus::parse_jsonl(src, "mem").unwrap();
        let b = AnnotatedCorpus::parse_jsonl(src, "mem").unwrap();
        assert_eq!(a, b);
    }
}
