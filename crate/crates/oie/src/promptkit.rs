//! Staged prompt assembly: initial instruction, optional error-correction
//! quiz, few-shot demonstrations, and the extraction query.
//!
//! `build_preamble` is pure: identical inputs yield byte-identical
//! transcripts. When a quiz is configured the preamble ends with the quiz
//! question and is marked pending; the gateway performs the live quiz turn
//! and appends the correction before the final extraction call.

use thiserror::Error;

use crate::corpus::{AnnotatedCorpus, AnnotatedSentence, Sentence};
use crate::parser::format_triplet;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot demonstrate sentence {id:?}: it has no gold triplets")]
    EmptyGold { id: String },
    #[error("demo mode {mode:?} is inconsistent with {given} provided demonstrations")]
    ModeMismatch { mode: DemoMode, given: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// An ordered chat conversation, possibly awaiting the quiz answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<ChatMessage>,
    /// When set, the last user message is the quiz question; the gateway must
    /// run the quiz turn and append the correction built from these answers.
    pub pending_quiz: Option<Vec<AnnotatedSentence>>,
}

impl Transcript {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Transcript { messages, pending_quiz: None }
    }

    pub fn push(&mut self, message: ChatMessage) {
        self.messages.push(message);
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoMode {
    None,
    Fixed,
    Selected,
}

#[derive(Debug, Clone)]
pub struct PromptConfig {
    pub instruction_text: String,
    /// Quiz sentences (with gold answers). Empty disables the quiz stage.
    pub quiz: Vec<AnnotatedSentence>,
    pub demo_count: usize,
    pub demo_mode: DemoMode,
    /// Static demonstrations used by [`DemoMode::Fixed`].
    pub fixed_demos: Vec<AnnotatedSentence>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            instruction_text: DEFAULT_INSTRUCTION.to_string(),
            quiz: default_quiz(),
            demo_count: 3,
            demo_mode: DemoMode::None,
            fixed_demos: default_fixed_demos(),
        }
    }
}

pub const DEFAULT_INSTRUCTION: &str = "You are an open information extraction system. \
Given a sentence, extract all (subject, relation, object) triplets expressing facts \
stated in the sentence. Output one triplet per line in the exact format \
`N. (subject, relation, object)` with N starting at 1. Output nothing else: no \
explanations, no headers, no blank lines.";

const DEFAULT_FIXED_DEMOS: &str = include_str!("../assets/fixed_demos.jsonl");
const DEFAULT_QUIZ: &str = include_str!("../assets/quiz.jsonl");

/// The three static demonstrations used by fixed-demo mode.
pub fn default_fixed_demos() -> Vec<AnnotatedSentence> {
    AnnotatedCorpus::parse_jsonl(DEFAULT_FIXED_DEMOS, "builtin:fixed_demos")
        .expect("builtin fixed demos parse")
        .items
}

/// The default two-sentence error-correction quiz.
pub fn default_quiz() -> Vec<AnnotatedSentence> {
    AnnotatedCorpus::parse_jsonl(DEFAULT_QUIZ, "builtin:quiz")
        .expect("builtin quiz parses")
        .items
}

/// Render one annotated sentence as an in-context demonstration block.
pub fn render_demonstration(a: &AnnotatedSentence) -> Result<String, PromptError> {
    if a.gold.is_empty() {
        return Err(PromptError::EmptyGold { id: a.sentence.id.clone() });
    }
    let mut out = format!("Sentence: {}\nTriplets:", a.sentence.text);
    for (i, t) in a.gold.iter().enumerate() {
        out.push('\n');
        out.push_str(&format_triplet(t, i + 1));
    }
    Ok(out)
}

/// The final user turn asking for extractions on the raw target text.
pub fn extraction_query(target: &Sentence) -> ChatMessage {
    ChatMessage::user(format!(
        "Identify as many combinations as possible in the following sentence: {}",
        target.text
    ))
}

const EXTRACTION_QUERY_PREFIX: &str =
    "Identify as many combinations as possible in the following sentence: ";

/// Recover the target sentence text from an extraction query, if the message
/// is one. Used by the synthetic test backend.
pub fn extraction_query_target(message: &ChatMessage) -> Option<&str> {
    if message.role != Role::User {
        return None;
    }
    message.content.strip_prefix(EXTRACTION_QUERY_PREFIX)
}

/// Build the correction message delivering quiz gold answers.
pub fn quiz_correction(quiz: &[AnnotatedSentence]) -> Result<ChatMessage, PromptError> {
    let mut blocks = Vec::with_capacity(quiz.len());
    for item in quiz {
        blocks.push(render_demonstration(item)?);
    }
    Ok(ChatMessage::user(format!(
        "Correct answers:\n\n{}",
        blocks.join("\n\n")
    )))
}

/// Assemble the preamble: system instruction, one user message carrying all
/// demonstrations, and (when configured) the quiz question, in that order.
pub fn build_preamble(
    config: &PromptConfig,
    demos: &[AnnotatedSentence],
) -> Result<Transcript, PromptError> {
    if config.demo_mode == DemoMode::None && !demos.is_empty() {
        return Err(PromptError::ModeMismatch { mode: config.demo_mode, given: demos.len() });
    }
    let mut messages = vec![ChatMessage::system(config.instruction_text.clone())];
    if !demos.is_empty() {
        let mut blocks = Vec::with_capacity(demos.len());
        for d in demos {
            blocks.push(render_demonstration(d)?);
        }
        messages.push(ChatMessage::user(format!(
            "Here are some examples:\n\n{}",
            blocks.join("\n\n")
        )));
    }
    let mut pending_quiz = None;
    if !config.quiz.is_empty() {
        // Fail early if any quiz item cannot be corrected later.
        for item in &config.quiz {
            if item.gold.is_empty() {
                return Err(PromptError::EmptyGold { id: item.sentence.id.clone() });
            }
        }
        let mut question =
            String::from("Extract the relational triplets from the following sentences:");
        for (i, item) in config.quiz.iter().enumerate() {
            question.push_str(&format!("\n{}. {}", i + 1, item.sentence.text));
        }
        messages.push(ChatMessage::user(question));
        pending_quiz = Some(config.quiz.clone());
    }
    Ok(Transcript { messages, pending_quiz })
}
