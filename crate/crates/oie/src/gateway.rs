//! Transcript execution against pluggable chat backends, with a
//! content-addressed response cache and the staged quiz protocol.
//!
//! Cache keys are SHA-256 over a canonical serialization: `backend_id`,
//! `model`, the temperature rendered with six decimals, `max_tokens`, each
//! followed by a NUL byte, then every message as `role NUL content NUL`.
//! With a warm cache a full run performs zero backend calls and reproduces
//! prior output byte-for-byte.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::promptkit::{quiz_correction, ChatMessage, Transcript};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend {backend} failed after {attempts} attempts: {message}")]
    Transport {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend {backend} returned a malformed payload: {excerpt}")]
    MalformedPayload { backend: String, excerpt: String },
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("quiz-staged transcript needs the final query appended before completion")]
    QuizWithoutQuery,
    #[error("temperature {0} exceeds the 2.0 ceiling")]
    BadTemperature(f64),
    #[error("cache I/O at {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] crate::promptkit::PromptError),
}

/// Error surface for chat backends; the gateway retries retriable failures.
#[derive(Debug)]
pub struct BackendError {
    pub message: String,
    pub retriable: bool,
}

impl BackendError {
    pub fn retriable(message: impl Into<String>) -> Self {
        BackendError { message: message.into(), retriable: true }
    }
    pub fn fatal(message: impl Into<String>) -> Self {
        BackendError { message: message.into(), retriable: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed_hint: Option<u64>,
}

impl CompletionParams {
    pub fn new(model: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        CompletionParams {
            model: model.into(),
            temperature,
            max_tokens,
            seed_hint: None,
        }
    }
}

impl Default for CompletionParams {
    fn default() -> Self {
        // Ensemble runs rely on response variability, so the default
        // temperature is non-zero; determinism in tests comes from mocks.
        CompletionParams::new("gpt-3.5-turbo", 0.7, 512)
    }
}

#[derive(Debug, Clone)]
pub struct RawResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError>;

    /// Maximum concurrent in-flight requests the caller should issue.
    fn max_in_flight(&self) -> usize {
        4
    }
}

/// Digest of the message list alone. Scripted mock fixtures key on this.
pub fn transcript_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(m.content.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// Stable cache key for one backend call.
pub fn cache_key(backend_id: &str, messages: &[ChatMessage], params: &CompletionParams) -> String {
    let mut hasher = Sha256::new();
    for field in [
        backend_id,
        &params.model,
        &format!("{:.6}", params.temperature),
        &params.max_tokens.to_string(),
    ] {
        hasher.update(field.as_bytes());
        hasher.update([0u8]);
    }
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(m.content.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

/// Response store: in-memory map or a content-addressed directory with one
/// file per key (written temp-then-rename, so concurrent writers converge).
pub enum ResponseCache {
    Memory(Mutex<HashMap<String, String>>),
    Disk(PathBuf),
}

impl ResponseCache {
    pub fn memory() -> Self {
        ResponseCache::Memory(Mutex::new(HashMap::new()))
    }

    pub fn disk(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| GatewayError::CacheIo {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(ResponseCache::Disk(dir))
    }

    fn get(&self, key: &str) -> Result<Option<String>, GatewayError> {
        match self {
            ResponseCache::Memory(map) => Ok(map.lock().unwrap().get(key).cloned()),
            ResponseCache::Disk(dir) => {
                let path = dir.join(key);
                match std::fs::read_to_string(&path) {
                    Ok(text) => Ok(Some(text)),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(source) => Err(GatewayError::CacheIo {
                        path: path.display().to_string(),
                        source,
                    }),
                }
            }
        }
    }

    fn put(&self, key: &str, value: &str) -> Result<(), GatewayError> {
        match self {
            ResponseCache::Memory(map) => {
                map.lock().unwrap().insert(key.to_string(), value.to_string());
                Ok(())
            }
            ResponseCache::Disk(dir) => {
                let tmp = dir.join(format!("{key}.tmp.{}", std::process::id()));
                let path = dir.join(key);
                let io = |source| GatewayError::CacheIo {
                    path: path.display().to_string(),
                    source,
                };
                std::fs::write(&tmp, value).map_err(io)?;
                std::fs::rename(&tmp, &path).map_err(io)?;
                Ok(())
            }
        }
    }
}

/// The outcome of completing a transcript: the final response plus the fully
/// realized conversation (quiz exchange included, final answer appended).
#[derive(Debug, Clone)]
pub struct Completion {
    pub response: RawResponse,
    pub transcript: Transcript,
}

pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache: ResponseCache,
    max_retries: u32,
    backoff_base: Duration,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, cache: ResponseCache) -> Self {
        Gateway {
            backend,
            cache,
            max_retries: 3,
            backoff_base: Duration::from_millis(50),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff_base: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff_base = backoff_base;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn max_in_flight(&self) -> usize {
        self.backend.max_in_flight()
    }

    /// Number of real backend calls made (cache hits excluded).
    pub fn call_count(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Complete a transcript. For a quiz-staged transcript the quiz turn runs
    /// first: the assistant's attempt and the gold correction are inserted
    /// before the final query, then the final turn is completed.
    pub fn complete(
        &self,
        transcript: &Transcript,
        params: &CompletionParams,
    ) -> Result<Completion, GatewayError> {
        if transcript.is_empty() {
            return Err(GatewayError::EmptyTranscript);
        }
        if params.temperature > 2.0 {
            return Err(GatewayError::BadTemperature(params.temperature));
        }
        let mut messages: Vec<ChatMessage>;
        match &transcript.pending_quiz {
            Some(quiz) => {
                if transcript.len() < 2 {
                    return Err(GatewayError::QuizWithoutQuery);
                }
                let split = transcript.len() - 1;
                let quiz_messages = &transcript.messages[..split];
                let quiz_answer = self.call(quiz_messages, params)?;
                messages = quiz_messages.to_vec();
                messages.push(ChatMessage::assistant(quiz_answer.text));
                messages.push(quiz_correction(quiz)?);
                messages.push(transcript.messages[split].clone());
            }
            None => messages = transcript.messages.clone(),
        }
        let response = self.call(&messages, params)?;
        messages.push(ChatMessage::assistant(response.text.clone()));
        Ok(Completion {
            response,
            transcript: Transcript::new(messages),
        })
    }

    fn call(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<RawResponse, GatewayError> {
        let key = cache_key(self.backend.id(), messages, params);
        if let Some(text) = self.cache.get(&key)? {
            return Ok(RawResponse {
                text,
                backend_id: self.backend.id().to_string(),
                cached: true,
                latency_ms: 0,
            });
        }
        let start = Instant::now();
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(messages, params) {
                Ok(text) => break text,
                Err(e) if e.retriable && attempt <= self.max_retries => {
                    log::warn!(
                        "backend {} attempt {attempt} failed: {}; retrying",
                        self.backend.id(),
                        e.message
                    );
                    std::thread::sleep(self.backoff_base * (1 << (attempt - 1).min(6)));
                }
                Err(e) if e.retriable => {
                    return Err(GatewayError::Transport {
                        backend: self.backend.id().to_string(),
                        attempts: attempt,
                        message: e.message,
                    });
                }
                Err(e) => {
                    return Err(GatewayError::MalformedPayload {
                        backend: self.backend.id().to_string(),
                        excerpt: e.message.chars().take(200).collect(),
                    });
                }
            }
        };
        self.cache.put(&key, &text)?;
        Ok(RawResponse {
            text,
            backend_id: self.backend.id().to_string(),
            cached: false,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedMockBackend;
    use crate::corpus::{Sentence, Triplet};
    use crate::promptkit::{build_preamble, extraction_query, DemoMode, PromptConfig};

    fn params() -> CompletionParams {
        CompletionParams::new("m", 0.0, 64)
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let msgs = vec![ChatMessage::system("x")];
        let a = cache_key("mock", &msgs, &params());
        let b = cache_key("mock", &msgs, &params());
        assert_eq!(a, b);
        let warm = CompletionParams::new("m", 0.7, 64);
        assert_ne!(a, cache_key("mock", &msgs, &warm));
    }

    #[test]
    fn cache_key_golden_value() {
        // Frozen from an independent SHA-256 over the documented serialization:
        // "mock\0m\00.000000\064\0system\0x\0".
        let msgs = vec![ChatMessage::system("x")];
        assert_eq!(
            cache_key("mock", &msgs, &params()),
            "9f7c9222503f3f243973492adbe8c10d9444439bd6c152cc5f561eb82628bb05"
        );
    }

    #[test]
    fn second_completion_is_cached_and_identical() {
        let msgs = vec![ChatMessage::system("sys"), ChatMessage::user("hi")];
        let digest = transcript_digest(&msgs);
        let backend =
            ScriptedMockBackend::new([(digest, "1. (a, b, c)".to_string())].into_iter().collect());
        let gw = Gateway::new(Box::new(backend), ResponseCache::memory());
        let t = Transcript::new(msgs);
        let first = gw.complete(&t, &params()).unwrap();
        let second = gw.complete(&t, &params()).unwrap();
        assert!(!first.response.cached);
        assert!(second.response.cached);
        assert_eq!(first.response.text, second.response.text);
        assert_eq!(gw.call_count(), 1);
    }

    #[test]
    fn quiz_staging_inserts_exchange_and_answers_final_turn() {
        let quiz_item = crate::corpus::AnnotatedSentence {
            sentence: Sentence::new("q1", "Q text").unwrap(),
            gold: vec![Triplet::new("q", "r", "s")],
        };
        let config = PromptConfig {
            quiz: vec![quiz_item],
            demo_mode: DemoMode::None,
            ..PromptConfig::default()
        };
        let mut preamble = build_preamble(&config, &[]).unwrap();
        let preamble_len = preamble.len();
        let target = Sentence::new("t", "A eats B").unwrap();
        preamble.push(extraction_query(&target));

        // Script both turns by replaying the staged protocol by hand.
        let quiz_messages = preamble.messages[..preamble_len].to_vec();
        let quiz_digest = transcript_digest(&quiz_messages);
        let mut final_messages = quiz_messages.clone();
        final_messages.push(ChatMessage::assistant("1. (q, wrong, s)"));
        final_messages.push(crate::promptkit::quiz_correction(
            preamble.pending_quiz.as_ref().unwrap(),
        ).unwrap());
        final_messages.push(preamble.messages[preamble_len].clone());
        let final_digest = transcript_digest(&final_messages);

        let backend = ScriptedMockBackend::new(
            [
                (quiz_digest, "1. (q, wrong, s)".to_string()),
                (final_digest, "1. (A, eats, B)".to_string()),
            ]
            .into_iter()
            .collect(),
        );
        let gw = Gateway::new(Box::new(backend), ResponseCache::memory());
        let done = gw.complete(&preamble, &params()).unwrap();
        assert_eq!(done.response.text, "1. (A, eats, B)");
        // preamble + 2 (quiz exchange) + 1 (query) + 1 (answer)
        assert_eq!(done.transcript.len(), preamble_len + 2 + 1 + 1);
        assert_eq!(gw.call_count(), 2);
    }

    #[test]
    fn disk_cache_round_trips_and_counts_once() {
        let dir = tempfile::tempdir().unwrap();
        let msgs = vec![ChatMessage::user("hello")];
        let digest = transcript_digest(&msgs);
        let backend =
            ScriptedMockBackend::new([(digest, "resp".to_string())].into_iter().collect());
        let gw = Gateway::new(Box::new(backend), ResponseCache::disk(dir.path()).unwrap());
        let t = Transcript::new(msgs);
        gw.complete(&t, &params()).unwrap();
        let again = gw.complete(&t, &params()).unwrap();
        assert!(again.response.cached);
        assert_eq!(gw.call_count(), 1);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn unknown_digest_is_a_fatal_error() {
        let backend = ScriptedMockBackend::new(Default::default());
        let gw = Gateway::new(Box::new(backend), ResponseCache::memory());
        let t = Transcript::new(vec![ChatMessage::user("?")]);
        assert!(matches!(
            gw.complete(&t, &params()),
            Err(GatewayError::MalformedPayload { .. })
        ));
    }

    #[test]
    fn random_transcripts_do_not_collide() {
        use std::collections::HashSet;
        let p = params();
        let mut keys = HashSet::new();
        for i in 0..100_000u64 {
            let msgs = vec![ChatMessage::user(format!("message {i}"))];
            assert!(keys.insert(cache_key("b", &msgs, &p)));
        }
    }
}
