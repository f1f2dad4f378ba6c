//! Sentence embedding and demonstration selection.
//!
//! A target sentence is embedded alongside every training sentence and the
//! top-k most cosine-similar annotated sentences become its demonstration
//! pool. Embedding sources sit behind [`EmbeddingBackend`]; tests use the
//! deterministic hashed bag-of-words backend, production uses an HTTP
//! embeddings endpoint.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{normalize_text, AnnotatedCorpus, AnnotatedSentence, Sentence};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("embedding backend {backend}: {message}")]
    Backend {
        backend: String,
        message: String,
        retriable: bool,
    },
    #[error("empty demonstration pool: every corpus sentence was excluded")]
    EmptyPool,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("non-finite embedding value from backend {backend}")]
    NonFinite { backend: String },
}

/// A fixed-length sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `dot(a, b) / (|a| * |b|)`, in [-1, 1] up to rounding.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (na * nb))
}

pub trait EmbeddingBackend: Send + Sync {
    /// Stable identifier, part of the embedding cache key.
    fn id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError>;
}

/// Deterministic test backend: hashed bag of words over normalized tokens,
/// 256 buckets, L2-normalized. `bucket = fnv1a64(token) % 256`.
pub struct HashedBowBackend;

pub const HASHED_BOW_DIM: usize = 256;

/// FNV-1a 64-bit. Hand-rolled so the bucket assignment is stable across
/// platforms and std versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingBackend for HashedBowBackend {
    fn id(&self) -> &str {
        "hashed-bow-256"
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let mut values = vec![0.0_f64; HASHED_BOW_DIM];
        let tokens = normalize_text(text);
        if tokens.is_empty() {
            // Punctuation-only text: hash the raw trimmed string instead.
            let bucket = (fnv1a64(text.trim().as_bytes()) % HASHED_BOW_DIM as u64) as usize;
            values[bucket] = 1.0;
        } else {
            for tok in &tokens {
                let bucket = (fnv1a64(tok.as_bytes()) % HASHED_BOW_DIM as u64) as usize;
                values[bucket] += 1.0;
            }
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        Ok(EmbeddingVector::new(values))
    }
}

/// Remote embeddings endpoint speaking the common
/// `POST {"model", "input": [...]} -> {"data": [{"embedding": [...]}]}` shape.
pub struct HttpEmbeddingBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingsDatum>,
}

#[derive(Deserialize)]
struct EmbeddingsDatum {
    embedding: Vec<f64>,
}

impl HttpEmbeddingBackend {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
        let url = format!("{}/v1/embeddings", base_url.trim_end_matches('/'));
        HttpEmbeddingBackend {
            id: format!("http:{model}"),
            url,
            model: model.to_string(),
            api_key,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let body = serde_json::json!({ "model": self.model, "input": [text] });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let backend = self.id.clone();
        let resp = req.send().map_err(|e| RetrievalError::Backend {
            backend: backend.clone(),
            message: e.to_string(),
            retriable: true,
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrievalError::Backend {
                backend,
                message: format!("HTTP {status}"),
                retriable: status.is_server_error(),
            });
        }
        let parsed: EmbeddingsResponse = resp.json().map_err(|e| RetrievalError::Backend {
            backend: backend.clone(),
            message: format!("malformed payload: {e}"),
            retriable: false,
        })?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| RetrievalError::Backend {
                backend: backend.clone(),
                message: "empty data array".to_string(),
                retriable: false,
            })?
            .embedding;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite { backend });
        }
        Ok(EmbeddingVector::new(values))
    }
}

/// Caching front for an embedding backend. Each (backend id, text) pair is
/// embedded at most once per process; the ensemble re-embeds nothing.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
    calls: AtomicU64,
}

impl Embedder {
    pub fn new(backend: Box<dyn EmbeddingBackend>) -> Self {
        Embedder {
            backend,
            cache: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Number of underlying backend calls (cache misses) so far.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let vector = self.backend.embed(text)?;
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), vector.clone());
        Ok(vector)
    }
}

/// The ranked demonstration candidates for one target sentence.
#[derive(Debug, Clone)]
pub struct DemonstrationPool {
    /// Sorted by similarity descending; ties broken by corpus load order.
    pub entries: Vec<(AnnotatedSentence, f64)>,
    pub target_id: String,
}

impl DemonstrationPool {
    pub fn demos(&self) -> Vec<AnnotatedSentence> {
        self.entries.iter().map(|(a, _)| a.clone()).collect()
    }
}

/// Rank corpus sentences by cosine similarity to the target and keep the top
/// `pool_size`. With `leakage_guard` on, corpus sentences whose normalized
/// text equals the target's are excluded.
pub fn select_demonstrations(
    target: &Sentence,
    corpus: &AnnotatedCorpus,
    pool_size: usize,
    embedder: &Embedder,
    leakage_guard: bool,
) -> Result<DemonstrationPool, RetrievalError> {
    let target_vec = embedder.embed(&target.text)?;
    let target_tokens = &target.tokens;
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (idx, item) in corpus.items.iter().enumerate() {
        if leakage_guard && &item.sentence.tokens == target_tokens {
            continue;
        }
        let vec = embedder.embed(&item.sentence.text)?;
        let sim = cosine_similarity(&target_vec, &vec)?;
        scored.push((idx, sim));
    }
    if scored.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    // Stable sort on descending similarity keeps corpus order for ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored.truncate(pool_size);
    Ok(DemonstrationPool {
        entries: scored
            .into_iter()
            .map(|(idx, sim)| (corpus.items[idx].clone(), sim))
            .collect(),
        target_id: target.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus_from(texts: &[&str]) -> AnnotatedCorpus {
        let items = texts
            .iter()
            .enumerate()
            .map(|(i, t)| AnnotatedSentence {
                sentence: Sentence::new(format!("s{i}"), *t).unwrap(),
                gold: vec![crate::corpus::Triplet::new("a", "b", "c")],
            })
            .collect();
        AnnotatedCorpus::new(items, "test")
    }

    #[test]
    fn embedding_is_deterministic() {
        let b = HashedBowBackend;
        assert_eq!(b.embed("a cat sat").unwrap(), b.embed("a cat sat").unwrap());
    }

    #[test]
    fn normalization_collapses_scalar_multiples() {
        let b = HashedBowBackend;
        assert_eq!(b.embed("a a").unwrap(), b.embed("a").unwrap());
    }

    #[test]
    fn distinct_tokens_hit_distinct_buckets() {
        // Bucket indices verified up front: fnv1a64("cat") % 256 != fnv1a64("dog") % 256.
        let cat = (fnv1a64(b"cat") % 256) as usize;
        let dog = (fnv1a64(b"dog") % 256) as usize;
        assert_ne!(cat, dog);
        let b = HashedBowBackend;
        assert_ne!(b.embed("cat").unwrap(), b.embed("dog").unwrap());
    }

    #[test]
    fn cosine_basics() {
        let e = |v: &[f64]| EmbeddingVector::new(v.to_vec());
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let got = cosine_similarity(&e(&[1.0, 1.0]), &e(&[1.0, 0.0])).unwrap();
        assert!((got - 0.70710678).abs() < 1e-8, "{got}");
    }

    #[test]
    fn cosine_rejects_mismatch_and_zero() {
        let e = |v: &[f64]| EmbeddingVector::new(v.to_vec());
        assert!(cosine_similarity(&e(&[1.0]), &e(&[1.0, 0.0])).is_err());
        assert!(cosine_similarity(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn pool_larger_than_corpus_returns_everything_sorted() {
        let corpus = corpus_from(&["the cat sat", "dogs bark loudly", "a cat sat down"]);
        let embedder = Embedder::new(Box::new(HashedBowBackend));
        let target = Sentence::new("t", "the cat sat down").unwrap();
        let pool = select_demonstrations(&target, &corpus, 10, &embedder, true).unwrap();
        assert_eq!(pool.entries.len(), 3);
        for w in pool.entries.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn leakage_guard_excludes_exact_match() {
        let corpus = corpus_from(&["the cat sat", "dogs bark"]);
        let embedder = Embedder::new(Box::new(HashedBowBackend));
        let target = Sentence::new("t", "The cat sat.").unwrap();
        let pool = select_demonstrations(&target, &corpus, 10, &embedder, true).unwrap();
        assert_eq!(pool.entries.len(), 1);
        assert_eq!(pool.entries[0].0.sentence.id, "s1");

        let pool = select_demonstrations(&target, &corpus, 10, &embedder, false).unwrap();
        assert_eq!(pool.entries.len(), 2);
    }

    #[test]
    fn all_excluded_is_an_error() {
        let corpus = corpus_from(&["the cat sat"]);
        let embedder = Embedder::new(Box::new(HashedBowBackend));
        let target = Sentence::new("t", "the cat sat").unwrap();
        assert!(matches!(
            select_demonstrations(&target, &corpus, 10, &embedder, true),
            Err(RetrievalError::EmptyPool)
        ));
    }

    #[test]
    fn five_sentence_ranking_matches_brute_force() {
        let corpus = corpus_from(&[
            "the cat sat on the mat",
            "a dog barked at the mailman",
            "the cat sat",
            "rain fell over the hills",
            "cats and dogs",
        ]);
        let embedder = Embedder::new(Box::new(HashedBowBackend));
        let target = Sentence::new("t", "the cat sat on a mat").unwrap();
        let pool = select_demonstrations(&target, &corpus, 3, &embedder, true).unwrap();

        // Brute-force oracle: compute every similarity, stable sort, truncate.
        let b = HashedBowBackend;
        let tv = b.embed(&target.text).unwrap();
        let mut all: Vec<(usize, f64)> = corpus
            .items
            .iter()
            .enumerate()
            .map(|(i, a)| (i, cosine_similarity(&tv, &b.embed(&a.sentence.text).unwrap()).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let expected: Vec<String> = all
            .iter()
            .take(3)
            .map(|(i, _)| corpus.items[*i].sentence.id.clone())
            .collect();
        let got: Vec<String> = pool
            .entries
            .iter()
            .map(|(a, _)| a.sentence.id.clone())
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn embedder_caches_by_text() {
        let embedder = Embedder::new(Box::new(HashedBowBackend));
        embedder.embed("one two").unwrap();
        embedder.embed("one two").unwrap();
        embedder.embed("three").unwrap();
        assert_eq!(embedder.call_count(), 2);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let ea = EmbeddingVector::new(a);
            let eb = EmbeddingVector::new(b);
            if let (Ok(ab), Ok(ba)) = (cosine_similarity(&ea, &eb), cosine_similarity(&eb, &ea)) {
                prop_assert_eq!(ab, ba);
                prop_assert!(ab.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn positive_scaling_preserves_ranking(scale in 0.1f64..100.0) {
            let e = |v: &[f64]| EmbeddingVector::new(v.to_vec());
            let target = e(&[1.0, 2.0, 3.0]);
            let other = e(&[2.0, 1.0, 0.5]);
            let scaled = EmbeddingVector::new(other.values.iter().map(|v| v * scale).collect());
            let s1 = cosine_similarity(&target, &other).unwrap();
            let s2 = cosine_similarity(&target, &scaled).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-9);
        }
    }
}
