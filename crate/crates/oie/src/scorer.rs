//! Scoring predicted triplets against gold sets: exact match on canonical
//! keys, lexical (stopword-filtered token-set overlap per slot), and the
//! graded tuple matcher with best-match precision and one-to-one recall.
//! `evaluate` sweeps the uncertainty threshold and reports the maximum F1
//! over the precision-recall points.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_text, AnnotatedCorpus, Triplet};
use crate::ensemble::ScoredTriplet;
use crate::parser::raw_key;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("prediction ids not present in the gold corpus: {0:?}")]
    UnknownIds(Vec<String>),
}

/// Slot-overlap stopwords for the lexical matcher. Function words alone must
/// not connect two otherwise disjoint slots.
const STOPWORDS: [&str; 8] = ["the", "a", "an", "of", "and", "to", "in", "is"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    Exact,
    Lexical,
    Tuple,
}

impl Matcher {
    pub fn as_str(&self) -> &'static str {
        match self {
            Matcher::Exact => "exact",
            Matcher::Lexical => "lexical",
            Matcher::Tuple => "tuple",
        }
    }
}

/// One accepted (prediction, gold) pairing at the reported threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchDecision {
    pub sentence_id: String,
    pub pred_index: usize,
    pub gold_index: usize,
    pub matcher: Matcher,
    /// 0/1 for boolean matchers, the recall-score for the tuple matcher.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCounts {
    pub num_pred: usize,
    pub num_gold: usize,
    /// Matched pairs for boolean matchers, summed recall-scores for tuple.
    pub matched: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub matcher: Matcher,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub best_threshold: f64,
    pub curve: Vec<CurvePoint>,
    pub counts: EvalCounts,
    pub matches: Vec<MatchDecision>,
}

/// Boolean exact match: equal canonical keys.
pub fn exact_match(pred: &Triplet, gold: &Triplet) -> bool {
    raw_key(pred) == raw_key(gold)
}

fn stop_filtered(tokens: &[String]) -> Vec<&String> {
    let kept: Vec<&String> = tokens
        .iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect();
    if kept.is_empty() {
        // All-stopword slots fall back to their full token set so that
        // identical slots always overlap themselves.
        tokens.iter().collect()
    } else {
        kept
    }
}

fn sets_intersect(a: &[String], b: &[String]) -> bool {
    let fa = stop_filtered(a);
    let fb = stop_filtered(b);
    fa.iter().any(|t| fb.contains(t))
}

/// Lexical match: after normalization and stopword filtering, the subject,
/// predicate, and object token sets each intersect (empty objects on both
/// sides also count).
pub fn lexical_match(pred: &Triplet, gold: &Triplet) -> bool {
    let ps = normalize_text(&pred.subject);
    let gs = normalize_text(&gold.subject);
    let pp = normalize_text(&pred.predicate);
    let gp = normalize_text(&gold.predicate);
    let po = normalize_text(&pred.object);
    let go = normalize_text(&gold.object);
    if !sets_intersect(&ps, &gs) || !sets_intersect(&pp, &gp) {
        return false;
    }
    if po.is_empty() && go.is_empty() {
        return true;
    }
    sets_intersect(&po, &go)
}

fn multiset_intersection(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut shared = 0;
    for t in a {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                shared += 1;
            }
        }
    }
    shared
}

/// Per-pair graded scores: summed slotwise token overlap divided by the
/// prediction's (resp. gold's) total token count.
pub fn tuple_pair_scores(pred: &Triplet, gold: &Triplet) -> (f64, f64) {
    let mut overlap = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    for (p_field, g_field) in pred.fields().into_iter().zip(gold.fields()) {
        let pt = normalize_text(p_field);
        let gt = normalize_text(g_field);
        overlap += multiset_intersection(&pt, &gt);
        pred_total += pt.len();
        gold_total += gt.len();
    }
    let pscore = if pred_total == 0 { 0.0 } else { overlap as f64 / pred_total as f64 };
    let rscore = if gold_total == 0 { 0.0 } else { overlap as f64 / gold_total as f64 };
    (pscore, rscore)
}

/// CaRB-style sentence scores: best-match precision, one-to-one greedy recall.
pub fn tuple_match_scores(preds: &[Triplet], golds: &[Triplet]) -> (f64, f64) {
    match (preds.is_empty(), golds.is_empty()) {
        (true, true) => return (1.0, 1.0),
        (true, false) => return (0.0, 0.0),
        (false, true) => return (0.0, 1.0),
        (false, false) => {}
    }
    let precision_sum: f64 = preds
        .iter()
        .map(|p| {
            golds
                .iter()
                .map(|g| tuple_pair_scores(p, g).0)
                .fold(0.0, f64::max)
        })
        .sum();
    let (recall_sum, _) = tuple_greedy_recall(preds, golds);
    (
        precision_sum / preds.len() as f64,
        recall_sum / golds.len() as f64,
    )
}

/// Greedy one-to-one matching on descending recall-score. Ties break toward
/// the lower prediction index, then the lower gold index. Returns the summed
/// matched recall-scores and the matched pairs.
fn tuple_greedy_recall(preds: &[Triplet], golds: &[Triplet]) -> (f64, Vec<(usize, usize, f64)>) {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (gi, g) in golds.iter().enumerate() {
            let (_, rscore) = tuple_pair_scores(p, g);
            if rscore > 0.0 {
                pairs.push((pi, gi, rscore));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.cmp(&b.1))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gold_used = vec![false; golds.len()];
    let mut total = 0.0;
    let mut matched = Vec::new();
    for (pi, gi, score) in pairs {
        if !pred_used[pi] && !gold_used[gi] {
            pred_used[pi] = true;
            gold_used[gi] = true;
            total += score;
            matched.push((pi, gi, score));
        }
    }
    (total, matched)
}

fn boolean_matcher_fn(matcher: Matcher) -> fn(&Triplet, &Triplet) -> bool {
    match matcher {
        Matcher::Exact => exact_match,
        Matcher::Lexical => lexical_match,
        Matcher::Tuple => unreachable!("tuple matcher is graded"),
    }
}

struct SweepPoint {
    precision: f64,
    recall: f64,
    counts: EvalCounts,
    matches: Vec<MatchDecision>,
}

/// Score per-sentence predictions against the gold corpus over a threshold
/// sweep and report the maximum-F1 point.
///
/// Thresholds default to the sorted distinct uncertainty values present plus
/// 1.0. At each threshold, predictions with uncertainty above it are dropped
/// and corpus micro-averaged precision/recall is recorded.
pub fn evaluate(
    predictions: &[(String, Vec<ScoredTriplet>)],
    golds: &AnnotatedCorpus,
    matcher: Matcher,
    thresholds: Option<&[f64]>,
) -> Result<EvalReport, ScoreError> {
    let gold_ids: std::collections::HashSet<&str> =
        golds.items.iter().map(|a| a.sentence.id.as_str()).collect();
    let unknown: Vec<String> = predictions
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !gold_ids.contains(id.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(ScoreError::UnknownIds(unknown));
    }
    let by_id: HashMap<&str, &Vec<ScoredTriplet>> = predictions
        .iter()
        .map(|(id, ts)| (id.as_str(), ts))
        .collect();

    let thresholds: Vec<f64> = match thresholds {
        Some(ts) => ts.to_vec(),
        None => {
            let mut ts: Vec<f64> = predictions
                .iter()
                .flat_map(|(_, preds)| preds.iter().map(|p| p.uncertainty))
                .chain(std::iter::once(1.0))
                .collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup();
            ts
        }
    };

    let mut curve = Vec::with_capacity(thresholds.len());
    let mut best: Option<(f64, usize)> = None;
    let mut points = Vec::with_capacity(thresholds.len());
    for (i, &k) in thresholds.iter().enumerate() {
        let point = sweep_point(&by_id, golds, matcher, k);
        let f1 = f1_of(point.precision, point.recall);
        curve.push(CurvePoint { threshold: k, precision: point.precision, recall: point.recall });
        if best.map_or(true, |(bf, _)| f1 > bf) {
            best = Some((f1, i));
        }
        points.push(point);
    }
    let (f1, best_idx) = best.expect("thresholds is never empty");
    let best_point = points.swap_remove(best_idx);
    Ok(EvalReport {
        matcher,
        precision: best_point.precision,
        recall: best_point.recall,
        f1,
        best_threshold: thresholds[best_idx],
        curve,
        counts: best_point.counts,
        matches: best_point.matches,
    })
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn sweep_point(
    by_id: &HashMap<&str, &Vec<ScoredTriplet>>,
    golds: &AnnotatedCorpus,
    matcher: Matcher,
    threshold: f64,
) -> SweepPoint {
    let mut num_pred = 0usize;
    let mut num_gold = 0usize;
    let mut matches = Vec::new();
    match matcher {
        Matcher::Exact | Matcher::Lexical => {
            let accept = boolean_matcher_fn(matcher);
            let mut matched = 0usize;
            for item in &golds.items {
                let id = item.sentence.id.as_str();
                let mut preds: Vec<&ScoredTriplet> = by_id
                    .get(id)
                    .map(|v| v.iter().filter(|p| p.uncertainty <= threshold).collect())
                    .unwrap_or_default();
                // Confident predictions claim golds first.
                preds.sort_by(|a, b| {
                    a.uncertainty
                        .partial_cmp(&b.uncertainty)
                        .unwrap()
                        .then_with(|| raw_key(&a.triplet).cmp(&raw_key(&b.triplet)))
                });
                num_pred += preds.len();
                num_gold += item.gold.len();
                let mut gold_used = vec![false; item.gold.len()];
                for (pi, pred) in preds.iter().enumerate() {
                    for (gi, gold) in item.gold.iter().enumerate() {
                        if !gold_used[gi] && accept(&pred.triplet, gold) {
                            gold_used[gi] = true;
                            matched += 1;
                            matches.push(MatchDecision {
                                sentence_id: id.to_string(),
                                pred_index: pi,
                                gold_index: gi,
                                matcher,
                                score: 1.0,
                            });
                            break;
                        }
                    }
                }
            }
            let precision = ratio(matched as f64, num_pred, num_gold == 0);
            let recall = ratio(matched as f64, num_gold, num_pred == 0);
            SweepPoint {
                precision,
                recall,
                counts: EvalCounts { num_pred, num_gold, matched: matched as f64 },
                matches,
            }
        }
        Matcher::Tuple => {
            let mut precision_sum = 0.0;
            let mut recall_sum = 0.0;
            for item in &golds.items {
                let id = item.sentence.id.as_str();
                let preds: Vec<Triplet> = by_id
                    .get(id)
                    .map(|v| {
                        v.iter()
                            .filter(|p| p.uncertainty <= threshold)
                            .map(|p| p.triplet.clone())
                            .collect()
                    })
                    .unwrap_or_default();
                num_pred += preds.len();
                num_gold += item.gold.len();
                precision_sum += preds
                    .iter()
                    .map(|p| {
                        item.gold
                            .iter()
                            .map(|g| tuple_pair_scores(p, g).0)
                            .fold(0.0, f64::max)
                    })
                    .sum::<f64>();
                let (sum, pairs) = tuple_greedy_recall(&preds, &item.gold);
                recall_sum += sum;
                for (pi, gi, score) in pairs {
                    matches.push(MatchDecision {
                        sentence_id: id.to_string(),
                        pred_index: pi,
                        gold_index: gi,
                        matcher,
                        score,
                    });
                }
            }
            let precision = ratio(precision_sum, num_pred, num_gold == 0);
            let recall = ratio(recall_sum, num_gold, num_pred == 0);
            SweepPoint {
                precision,
                recall,
                counts: EvalCounts { num_pred, num_gold, matched: recall_sum },
                matches,
            }
        }
    }
}

/// `numerator / denominator`, with an empty denominator scoring perfect only
/// when the other side is empty too.
fn ratio(numerator: f64, denominator: usize, other_empty: bool) -> f64 {
    if denominator == 0 {
        if other_empty {
            1.0
        } else {
            0.0
        }
    } else {
        numerator / denominator as f64
    }
}
