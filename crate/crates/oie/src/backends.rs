//! Chat backends: the HTTP chat-completions client, a scripted mock replaying
//! canned responses by transcript digest, and a synthetic extractor that
//! perturbs gold annotations for offline ensemble testing.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::corpus::{AnnotatedCorpus, Triplet};
use crate::gateway::{BackendError, ChatBackend, CompletionParams};
use crate::parser::format_triplet;
use crate::promptkit::{extraction_query_target, ChatMessage};
use crate::retrieval::fnv1a64;

/// OpenAI-compatible `/v1/chat/completions` backend. The API key comes from
/// an environment variable, never from flags or config files.
pub struct HttpChatBackend {
    id: String,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

pub const API_KEY_ENV: &str = "OIE_API_KEY";

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

impl HttpChatBackend {
    pub fn new(base_url: &str) -> Self {
        HttpChatBackend {
            id: format!("http:{}", base_url.trim_end_matches('/')),
            url: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            api_key: std::env::var(API_KEY_ENV).ok(),
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn has_credentials(&self) -> bool {
        self.api_key.is_some()
    }
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        let payload = serde_json::json!({
            "model": params.model,
            "messages": messages
                .iter()
                .map(|m| serde_json::json!({ "role": m.role.as_str(), "content": m.content }))
                .collect::<Vec<_>>(),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let mut req = self.client.post(&self.url).json(&payload);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::retriable(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| BackendError::retriable(e.to_string()))?;
        if !status.is_success() {
            let err = BackendError {
                message: format!("HTTP {status}: {}", &body.chars().take(200).collect::<String>()),
                retriable: status.is_server_error() || status.as_u16() == 429,
            };
            return Err(err);
        }
        let parsed: ChatResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::fatal(format!("{e}; payload: {:.200}", body)))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::fatal(format!("no choices in payload: {:.200}", body)))
    }
}

/// Mock backend mapping transcript digests to canned responses, loaded from a
/// JSONL fixture of `{"key": digest, "response": string}` lines.
pub struct ScriptedMockBackend {
    responses: HashMap<String, String>,
}

#[derive(Deserialize)]
struct MockFixtureLine {
    key: String,
    response: String,
}

impl ScriptedMockBackend {
    pub fn new(responses: HashMap<String, String>) -> Self {
        ScriptedMockBackend { responses }
    }

    pub fn from_fixture(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let contents = std::fs::read_to_string(path)?;
        let mut responses = HashMap::new();
        for line in contents.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: MockFixtureLine = serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            responses.insert(parsed.key, parsed.response);
        }
        Ok(ScriptedMockBackend { responses })
    }
}

impl ChatBackend for ScriptedMockBackend {
    fn id(&self) -> &str {
        "scripted-mock"
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &CompletionParams,
    ) -> Result<String, BackendError> {
        let digest = crate::gateway::transcript_digest(messages);
        self.responses
            .get(&digest)
            .cloned()
            .ok_or_else(|| BackendError::fatal(format!("no scripted response for digest {digest}")))
    }
}

/// Synthetic extractor for offline ensemble tests.
///
/// It recovers the target sentence from the extraction query and replies with
/// that sentence's gold triplets, dropping each with probability `p_drop` and
/// injecting one random distractor with probability `p_noise`. Transcripts
/// without a demonstration block answer with degraded rates, so the ablation
/// modes separate the way the real pipeline's do. Responses are a pure
/// function of (seed, transcript), which keeps ensembles replayable.
pub struct SyntheticExtractorBackend {
    gold: HashMap<String, Vec<Triplet>>,
    seed: u64,
    p_drop: f64,
    p_noise: f64,
    /// Added to both rates when the transcript carries no demonstrations.
    zero_demo_penalty: f64,
}

impl SyntheticExtractorBackend {
    pub fn new(corpus: &AnnotatedCorpus, seed: u64, p_drop: f64, p_noise: f64) -> Self {
        let gold = corpus
            .items
            .iter()
            .map(|a| (a.sentence.text.clone(), a.gold.clone()))
            .collect();
        SyntheticExtractorBackend {
            gold,
            seed,
            p_drop,
            p_noise,
            zero_demo_penalty: 0.35,
        }
    }

    fn rng_for(&self, messages: &[ChatMessage]) -> ChaCha8Rng {
        let digest = crate::gateway::transcript_digest(messages);
        let mixed = self.seed ^ fnv1a64(digest.as_bytes());
        ChaCha8Rng::seed_from_u64(mixed)
    }
}

impl ChatBackend for SyntheticExtractorBackend {
    fn id(&self) -> &str {
        "synthetic-extractor"
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        _params: &CompletionParams,
    ) -> Result<String, BackendError> {
        let last = messages
            .last()
            .ok_or_else(|| BackendError::fatal("empty message list"))?;
        let Some(target) = extraction_query_target(last) else {
            // Quiz turn: a deliberately imperfect attempt.
            return Ok("1. (something, relates to, something else)".to_string());
        };
        let Some(gold) = self.gold.get(target) else {
            return Ok("No triplets found.".to_string());
        };
        let has_demos = messages
            .iter()
            .any(|m| m.content.starts_with("Here are some examples:"));
        let penalty = if has_demos { 0.0 } else { self.zero_demo_penalty };
        let p_drop = (self.p_drop + penalty).min(0.95);
        let p_noise = (self.p_noise + penalty).min(0.95);

        let mut rng = self.rng_for(messages);
        let mut kept: Vec<Triplet> = Vec::new();
        for t in gold {
            if rng.random::<f64>() >= p_drop {
                kept.push(t.clone());
            }
        }
        if rng.random::<f64>() < p_noise {
            let tag: u32 = rng.random();
            kept.push(Triplet::new(
                format!("distractor-{tag:08x}"),
                "relates to",
                format!("artifact-{tag:08x}"),
            ));
        }
        if kept.is_empty() {
            return Ok("No triplets found.".to_string());
        }
        Ok(kept
            .iter()
            .enumerate()
            .map(|(i, t)| format_triplet(t, i + 1))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}
