//! End-to-end extraction pipeline: one of four ablation modes applied to
//! every sentence of a test corpus, with a bounded worker pool and ordered
//! output.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::corpus::{AnnotatedCorpus, Sentence};
use crate::ensemble::{
    compute_uncertainty, filter_by_threshold, sample_subsets, EnsembleConfig, ExtractionRecord,
    RecordTriplet, ScoredTriplet,
};
use crate::gateway::{CompletionParams, Gateway, GatewayError};
use crate::parser::parse_response;
use crate::promptkit::{build_preamble, extraction_query, DemoMode, PromptConfig, PromptError};
use crate::retrieval::{select_demonstrations, Embedder, RetrievalError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("mode {0:?} needs a training corpus for demonstration selection")]
    MissingTrainCorpus(PipelineMode),
    #[error("mode {0:?} needs an embedding backend")]
    MissingEmbedder(PipelineMode),
}

/// The four ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// No demonstrations, no quiz, no ensemble.
    ZeroShot,
    /// The three static demonstrations, single run.
    FixedDemo,
    /// Retrieval-selected demonstrations, single run.
    SelectedDemo,
    /// Retrieval, subset ensemble, uncertainty filter.
    SelectedDemoUncertainty,
}

impl PipelineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineMode::ZeroShot => "zero_shot",
            PipelineMode::FixedDemo => "fixed_demo",
            PipelineMode::SelectedDemo => "selected_demo",
            PipelineMode::SelectedDemoUncertainty => "selected_demo_uncertainty",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero_shot" => Some(PipelineMode::ZeroShot),
            "fixed_demo" => Some(PipelineMode::FixedDemo),
            "selected_demo" => Some(PipelineMode::SelectedDemo),
            "selected_demo_uncertainty" => Some(PipelineMode::SelectedDemoUncertainty),
            _ => None,
        }
    }

    pub fn needs_retrieval(&self) -> bool {
        matches!(
            self,
            PipelineMode::SelectedDemo | PipelineMode::SelectedDemoUncertainty
        )
    }
}

#[derive(Clone)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub prompt: PromptConfig,
    pub pool_size: usize,
    pub ensemble: EnsembleConfig,
    pub params: CompletionParams,
    pub leakage_guard: bool,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: PipelineMode::ZeroShot,
            prompt: PromptConfig::default(),
            pool_size: 10,
            ensemble: EnsembleConfig::default(),
            params: CompletionParams::default(),
            leakage_guard: true,
            workers: 4,
        }
    }
}

pub struct ExtractOutcome {
    /// One record per test sentence, in corpus order.
    pub records: Vec<ExtractionRecord>,
    pub failures: usize,
    pub sentences: usize,
}

/// Run one sentence through the configured mode.
pub fn extract_sentence(
    target: &Sentence,
    train: Option<&AnnotatedCorpus>,
    config: &PipelineConfig,
    gateway: &Gateway,
    embedder: Option<&Embedder>,
) -> Result<ExtractionRecord, PipelineError> {
    let (scored, total, runs): (Vec<ScoredTriplet>, usize, usize) = match config.mode {
        PipelineMode::ZeroShot => {
            let mut prompt = config.prompt.clone();
            prompt.demo_mode = DemoMode::None;
            prompt.quiz.clear();
            single_run(target, &prompt, &[], config, gateway)?
        }
        PipelineMode::FixedDemo => {
            let mut prompt = config.prompt.clone();
            prompt.demo_mode = DemoMode::Fixed;
            let demos = prompt.fixed_demos.clone();
            single_run(target, &prompt, &demos, config, gateway)?
        }
        PipelineMode::SelectedDemo => {
            let pool = retrieve_pool(target, train, config, embedder)?;
            let mut prompt = config.prompt.clone();
            prompt.demo_mode = DemoMode::Selected;
            let demos: Vec<_> = pool
                .demos()
                .into_iter()
                .take(config.prompt.demo_count)
                .collect();
            single_run(target, &prompt, &demos, config, gateway)?
        }
        PipelineMode::SelectedDemoUncertainty => {
            let pool = retrieve_pool(target, train, config, embedder)?;
            let mut prompt = config.prompt.clone();
            prompt.demo_mode = DemoMode::Selected;
            let subsets = sample_subsets(&pool, &config.ensemble);
            let runs =
                crate::ensemble::run_ensemble(target, subsets, &prompt, gateway, &config.params)?;
            let scored = compute_uncertainty(&runs, config.ensemble.count_mode);
            let kept = filter_by_threshold(
                &scored,
                config.ensemble.threshold,
                config.ensemble.filter_rule,
            );
            let kept_keys: std::collections::HashSet<String> =
                kept.iter().map(crate::parser::raw_key).collect();
            let total: usize = runs.iter().map(|r| r.triplets.len()).sum();
            let filtered: Vec<ScoredTriplet> = scored
                .into_iter()
                .filter(|s| kept_keys.contains(&crate::parser::raw_key(&s.triplet)))
                .collect();
            (filtered, total, runs.len())
        }
    };
    Ok(ExtractionRecord {
        id: target.id.clone(),
        sentence: target.text.clone(),
        triplets: scored.iter().map(RecordTriplet::from_scored).collect(),
        total_occurrences: total,
        ensemble: runs,
        mode: config.ensemble.count_mode,
        k: config.ensemble.threshold,
    })
}

fn retrieve_pool(
    target: &Sentence,
    train: Option<&AnnotatedCorpus>,
    config: &PipelineConfig,
    embedder: Option<&Embedder>,
) -> Result<crate::retrieval::DemonstrationPool, PipelineError> {
    let train = train.ok_or(PipelineError::MissingTrainCorpus(config.mode))?;
    let embedder = embedder.ok_or(PipelineError::MissingEmbedder(config.mode))?;
    Ok(select_demonstrations(
        target,
        train,
        config.pool_size,
        embedder,
        config.leakage_guard,
    )?)
}

/// Non-ensemble path: one completion, every triplet at uncertainty zero.
fn single_run(
    target: &Sentence,
    prompt: &PromptConfig,
    demos: &[crate::corpus::AnnotatedSentence],
    config: &PipelineConfig,
    gateway: &Gateway,
) -> Result<(Vec<ScoredTriplet>, usize, usize), PipelineError> {
    let mut transcript = build_preamble(prompt, demos)?;
    transcript.push(extraction_query(target));
    let done = gateway.complete(&transcript, &config.params)?;
    let (triplets, warnings) = parse_response(&done.response.text);
    for w in &warnings {
        log::debug!("sentence {}: parse warning: {w}", target.id);
    }
    let total = triplets.len();
    let scored = triplets
        .into_iter()
        .map(|triplet| ScoredTriplet { triplet, count: 1, uncertainty: 0.0 })
        .collect();
    Ok((scored, total, 1))
}

/// Run every corpus sentence through the pipeline with a bounded worker pool.
/// Output order matches corpus order regardless of completion order; failed
/// sentences are logged and emitted as empty records.
pub fn extract_corpus(
    test: &AnnotatedCorpus,
    train: Option<&AnnotatedCorpus>,
    config: &PipelineConfig,
    gateway: &Gateway,
    embedder: Option<&Embedder>,
) -> ExtractOutcome {
    let workers = config.workers.min(gateway.max_in_flight()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ExtractionRecord>>> =
        Mutex::new((0..test.len()).map(|_| None).collect());
    let failures = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= test.len() {
                    break;
                }
                let item = &test.items[idx];
                let started = std::time::Instant::now();
                let record =
                    match extract_sentence(&item.sentence, train, config, gateway, embedder) {
                        Ok(record) => record,
                        Err(e) => {
                            log::warn!("sentence {}: extraction failed: {e}", item.sentence.id);
                            failures.fetch_add(1, Ordering::SeqCst);
                            ExtractionRecord {
                                id: item.sentence.id.clone(),
                                sentence: item.sentence.text.clone(),
                                triplets: Vec::new(),
                                total_occurrences: 0,
                                ensemble: 0,
                                mode: config.ensemble.count_mode,
                                k: config.ensemble.threshold,
                            }
                        }
                    };
                log::info!(
                    "sentence {}: {} triplets in {} ms",
                    item.sentence.id,
                    record.triplets.len(),
                    started.elapsed().as_millis()
                );
                slots.lock().unwrap()[idx] = Some(record);
            });
        }
    });
    ExtractOutcome {
        records: slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect(),
        failures: failures.into_inner(),
        sentences: test.len(),
    }
}

/// Serialize extraction records as JSONL, one record per line.
pub fn records_to_jsonl(records: &[ExtractionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parse an extraction JSONL file into per-sentence scored triplet lists.
pub fn records_from_jsonl(contents: &str) -> Result<Vec<ExtractionRecord>, serde_json::Error> {
    contents
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
