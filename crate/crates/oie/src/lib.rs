//! Few-shot relational triplet extraction with demonstration-uncertainty
//! filtering, plus the benchmark scoring harness used to measure it.
//!
//! The pipeline embeds a target sentence, retrieves structurally similar
//! annotated demonstrations, prompts a chat model through a staged
//! instruction/quiz transcript, runs an ensemble over sampled demonstration
//! subsets, scores each extracted triplet by how consistently it recurs, and
//! filters the unstable ones. The scorer module evaluates predictions with
//! exact, lexical, or CaRB-style tuple matching and reports max-F1 over the
//! uncertainty sweep.

pub mod backends;
pub mod cli;
pub mod corpus;
pub mod ensemble;
pub mod gateway;
pub mod parser;
pub mod pipeline;
pub mod promptkit;
pub mod retrieval;
pub mod scorer;

pub use corpus::{AnnotatedCorpus, AnnotatedSentence, Sentence, Triplet};
pub use ensemble::{CountMode, EnsembleConfig, FilterRule, ScoredTriplet};
pub use gateway::{CompletionParams, Gateway, ResponseCache};
pub use pipeline::{PipelineConfig, PipelineMode};
pub use scorer::{EvalReport, Matcher};
