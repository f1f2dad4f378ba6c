//! Demonstration-uncertainty ensemble: sample demonstration subsets, run the
//! extraction once per subset, score each distinct triplet by how often it
//! recurs across runs, and filter by threshold.
//!
//! Two denominators are shipped for the uncertainty score. `Concat` divides a
//! triplet's run count by the total number of collected triplet occurrences
//! (the default), `RunFraction` divides by the number of runs. A triplet seen
//! in every run has uncertainty zero only under `RunFraction`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Sentence, Triplet};
use crate::gateway::{CompletionParams, Gateway, GatewayError, RawResponse};
use crate::parser::{parse_response, raw_key};
use crate::promptkit::{build_preamble, extraction_query, PromptConfig, Transcript};
use crate::retrieval::DemonstrationPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Denominator is the total number of triplet occurrences across runs.
    Concat,
    /// Denominator is the number of runs.
    RunFraction,
}

impl CountMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CountMode::Concat => "concat",
            CountMode::RunFraction => "run_fraction",
        }
    }
}

/// Which side of the threshold survives filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterRule {
    /// Keep triplets with `u <= k` (drop the high-uncertainty ones).
    KeepConfident,
    /// Keep triplets with `u >= k`. Matches a literal reading of the
    /// filter set-builder; available for exactness audits only.
    KeepUncertain,
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    /// Number of sampled demonstration subsets (ensemble members).
    pub ensemble_size: usize,
    pub subset_size: usize,
    /// Uncertainty threshold k.
    pub threshold: f64,
    pub seed: u64,
    pub count_mode: CountMode,
    pub filter_rule: FilterRule,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            ensemble_size: 5,
            subset_size: 3,
            threshold: 0.8,
            seed: 0,
            count_mode: CountMode::Concat,
            filter_rule: FilterRule::KeepConfident,
        }
    }
}

/// One sampled demonstration subset.
#[derive(Debug, Clone)]
pub struct DemonstrationSubset {
    pub demos: Vec<AnnotatedSentence>,
    pub draw_index: usize,
    pub seed: u64,
}

/// One ensemble member's completed extraction.
#[derive(Debug, Clone)]
pub struct ExtractionRun {
    pub subset: DemonstrationSubset,
    pub transcript: Transcript,
    pub raw: Option<RawResponse>,
    /// Parsed and deduplicated within the run; empty when the run failed.
    pub triplets: Vec<Triplet>,
    pub error: Option<String>,
}

/// A triplet with its cross-run occurrence count and uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriplet {
    pub triplet: Triplet,
    pub count: usize,
    pub uncertainty: f64,
}

fn draw_rng(seed: u64, draw_index: usize) -> ChaCha8Rng {
    // Splitmix-style stream separation so each draw gets its own stream.
    let mixed = seed ^ (draw_index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Draw `ensemble_size` subsets uniformly without replacement from the pool.
/// Deterministic in `(config.seed, draw_index)`; subsets may overlap.
pub fn sample_subsets(
    pool: &DemonstrationPool,
    config: &EnsembleConfig,
) -> Vec<DemonstrationSubset> {
    let n = pool.entries.len();
    let size = if config.subset_size > n {
        log::warn!(
            "subset_size {} clamped to pool size {n}",
            config.subset_size
        );
        n
    } else {
        config.subset_size
    };
    (0..config.ensemble_size)
        .map(|draw_index| {
            let mut rng = draw_rng(config.seed, draw_index);
            let indices = rand::seq::index::sample(&mut rng, n, size);
            DemonstrationSubset {
                demos: indices
                    .iter()
                    .map(|i| pool.entries[i].0.clone())
                    .collect(),
                draw_index,
                seed: config.seed,
            }
        })
        .collect()
}

/// Execute one extraction per subset. Failed runs are recorded with empty
/// triplets and an error note; the ensemble keeps going. The output is
/// ordered by draw index.
pub fn run_ensemble(
    target: &Sentence,
    subsets: Vec<DemonstrationSubset>,
    prompt_config: &PromptConfig,
    gateway: &Gateway,
    params: &CompletionParams,
) -> Result<Vec<ExtractionRun>, GatewayError> {
    let mut runs = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let mut transcript = build_preamble(prompt_config, &subset.demos)?;
        transcript.push(extraction_query(target));
        match gateway.complete(&transcript, params) {
            Ok(done) => {
                let (triplets, warnings) = parse_response(&done.response.text);
                for w in &warnings {
                    log::debug!("sentence {}: parse warning: {w}", target.id);
                }
                runs.push(ExtractionRun {
                    subset,
                    transcript: done.transcript,
                    raw: Some(done.response),
                    triplets,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!(
                    "sentence {} draw {}: backend failure: {e}",
                    target.id,
                    subset.draw_index
                );
                runs.push(ExtractionRun {
                    subset,
                    transcript,
                    raw: None,
                    triplets: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(runs)
}

/// Score every distinct triplet across the runs.
///
/// `count` is the number of runs containing the triplet (within-run
/// duplicates were already collapsed). Output is sorted by uncertainty
/// ascending, ties by canonical key.
pub fn compute_uncertainty(runs: &[ExtractionRun], mode: CountMode) -> Vec<ScoredTriplet> {
    let total_occurrences: usize = runs.iter().map(|r| r.triplets.len()).sum();
    if total_occurrences == 0 {
        return Vec::new();
    }
    let denominator = match mode {
        CountMode::Concat => total_occurrences as f64,
        CountMode::RunFraction => runs.len() as f64,
    };
    let mut order: Vec<String> = Vec::new();
    let mut counts: std::collections::HashMap<String, (Triplet, usize)> =
        std::collections::HashMap::new();
    for run in runs {
        for t in &run.triplets {
            let key = raw_key(t);
            match counts.get_mut(&key) {
                Some(entry) => entry.1 += 1,
                None => {
                    order.push(key.clone());
                    counts.insert(key, (t.clone(), 1));
                }
            }
        }
    }
    let mut scored: Vec<(String, ScoredTriplet)> = order
        .into_iter()
        .map(|key| {
            let (triplet, count) = counts.remove(&key).unwrap();
            let uncertainty = 1.0 - count as f64 / denominator;
            (key, ScoredTriplet { triplet, count, uncertainty })
        })
        .collect();
    scored.sort_by(|a, b| {
        a.1.uncertainty
            .partial_cmp(&b.1.uncertainty)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.into_iter().map(|(_, s)| s).collect()
}

/// Apply the threshold, preserving the scored ordering.
pub fn filter_by_threshold(
    scored: &[ScoredTriplet],
    threshold: f64,
    rule: FilterRule,
) -> Vec<Triplet> {
    scored
        .iter()
        .filter(|s| match rule {
            FilterRule::KeepConfident => s.uncertainty <= threshold,
            FilterRule::KeepUncertain => s.uncertainty >= threshold,
        })
        .map(|s| s.triplet.clone())
        .collect()
}

/// One line of the extraction output JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub id: String,
    pub sentence: String,
    pub triplets: Vec<RecordTriplet>,
    #[serde(rename = "N")]
    pub total_occurrences: usize,
    pub ensemble: usize,
    pub mode: CountMode,
    pub k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub uncertainty: f64,
    pub count: usize,
}

impl RecordTriplet {
    pub fn from_scored(s: &ScoredTriplet) -> Self {
        RecordTriplet {
            subject: s.triplet.subject.clone(),
            predicate: s.triplet.predicate.clone(),
            object: s.triplet.object.clone(),
            uncertainty: s.uncertainty,
            count: s.count,
        }
    }

    pub fn to_scored(&self) -> ScoredTriplet {
        ScoredTriplet {
            triplet: Triplet::new(&self.subject, &self.predicate, &self.object),
            count: self.count,
            uncertainty: self.uncertainty,
        }
    }
}
