// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head OCR and retrieval scores, their cross-instance aggregates, and
//! head classification.
//!
//! For a head `h`, `g_h` is the set of distinct answer tokens `w` that were
//! generated at some step where the head's argmax position `j` satisfied
//! the kind's condition:
//!
//! - OCR: `j` is an evidence patch token.
//! - retrieval: the context token at `j` has the same text as `w`.
//!
//! The score is `|g_h ∩ k| / |k|` with `k` the set of distinct answer tokens.
//! Scores are carried as exact `(hits, |k|)` pairs and only become floats at
//! the edges.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{all_heads, HeadId};
use crate::patch::EvidenceSet;
use crate::trace::{AttentionTrace, StepSpan, TraceError};

/// Exact rational used for aggregated means.
pub type Exact = Ratio<u128>;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("answer has no tokens")]
    EmptyAnswer,
    #[error("evidence set is empty")]
    EmptyEvidence,
    #[error("evidence index {0} is not an image token of the trace layout")]
    EvidenceOutsideImages(usize),
    #[error("trace has no input_token_texts")]
    MissingInputTexts,
    #[error("positional retrieval scoring needs at least one answer position")]
    NoAnswerPositions,
    #[error("trace has no generation segments")]
    MissingSegments,
    #[error("chain-of-thought retrieval scoring needs a causal-context trace")]
    NonCausalTrace,
    #[error("score matrices mix kinds {0:?} and {1:?}")]
    MixedKinds(ScoreKind, ScoreKind),
    #[error("score matrix is {found:?}, expected {expected:?} layers x heads")]
    ShapeMismatch { expected: (u32, u32), found: (u32, u32) },
    #[error("no score matrices to aggregate")]
    EmptyInput,
    #[error("aggregate was built with hit threshold {built}, detection asks for {requested}")]
    ThresholdMismatch { built: f64, requested: f64 },
    #[error("k = {k} exceeds {available} heads")]
    KTooLarge { k: usize, available: usize },
    #[error("exact mean overflowed")]
    Overflow,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Ocr,
    Retrieval,
}

/// How answer strings are split into tokens when no real tokenizer output
/// is available.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerView {
    Characters,
    Whitespace,
    /// Token strings supplied by the model adapter.
    Tokens(Vec<String>),
}

/// How generated tokens are compared with answer and context tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMatch {
    /// Byte equality.
    #[default]
    Exact,
    /// Equality after trimming surrounding whitespace (e.g. a leading-space marker).
    TrimWhitespace,
}

impl TokenMatch {
    pub fn normalize<'a>(&self, token: &'a str) -> &'a str {
        match self {
            TokenMatch::Exact => token,
            TokenMatch::TrimWhitespace => token.trim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoringOptions {
    #[serde(default)]
    pub token_match: TokenMatch,
    /// Retrieval: additionally require the argmax to be one of the given
    /// answer positions rather than any context token with matching text.
    #[serde(default)]
    pub positional_retrieval: bool,
}

/// The distinct answer tokens `k`, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTokens(Vec<String>);

impl AnswerTokens {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Result<Self, ScoringError> {
        let set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(ScoringError::EmptyAnswer);
        }
        Ok(Self(set.into_iter().collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    fn position(&self, token: &str, matching: TokenMatch) -> Option<usize> {
        let token = matching.normalize(token);
        match matching {
            TokenMatch::Exact => self.0.binary_search_by(|t| t.as_str().cmp(token)).ok(),
            TokenMatch::TrimWhitespace => self.0.iter().position(|t| t.trim() == token),
        }
    }
}

/// Splits `answer` under `view` and deduplicates.
pub fn answer_token_set(answer: &str, view: &TokenizerView) -> Result<AnswerTokens, ScoringError> {
    if answer.is_empty() {
        return Err(ScoringError::EmptyAnswer);
    }
    match view {
        TokenizerView::Characters => AnswerTokens::new(answer.chars().map(String::from)),
        TokenizerView::Whitespace => AnswerTokens::new(answer.split_whitespace()),
        TokenizerView::Tokens(tokens) => AnswerTokens::new(tokens.iter().cloned()),
    }
}

/// Per-head scores of one instance, stored as hit counts over `|k|`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub instance_id: String,
    pub kind: ScoreKind,
    pub num_layers: u32,
    pub num_heads: u32,
    pub answer_tokens: Vec<String>,
    /// Layer-major `|g_h ∩ k|` per head.
    pub hits: Vec<u32>,
}

impl ScoreMatrix {
    pub fn denom(&self) -> u32 {
        self.answer_tokens.len() as u32
    }

    pub fn hits(&self, head: HeadId) -> u32 {
        self.hits[head.flat(self.num_heads)]
    }

    pub fn score(&self, head: HeadId) -> f64 {
        self.hits(head) as f64 / self.denom() as f64
    }

    /// Exact score as a reduced fraction.
    pub fn ratio(&self, head: HeadId) -> Exact {
        Exact::new(self.hits(head) as u128, self.denom() as u128)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.hits.iter().map(|&h| h as f64 / self.denom() as f64).collect()
    }
}

fn matrix(trace: &AttentionTrace, kind: ScoreKind, k: &AnswerTokens, seen: &[bool]) -> ScoreMatrix {
    let heads = trace.header.head_count();
    let hits = (0..heads)
        .map(|h| seen[h * k.len()..(h + 1) * k.len()].iter().filter(|b| **b).count() as u32)
        .collect();
    ScoreMatrix {
        instance_id: trace.header.trace_id.clone(),
        kind,
        num_layers: trace.header.num_layers,
        num_heads: trace.header.num_heads,
        answer_tokens: k.tokens().to_vec(),
        hits,
    }
}

/// Marks `(head, answer token)` pairs for which `accept(step, argmax)` holds.
fn collect_hits(
    trace: &AttentionTrace,
    steps: std::ops::Range<usize>,
    k: &AnswerTokens,
    matching: TokenMatch,
    mut accept: impl FnMut(&str, usize) -> bool,
) -> Vec<bool> {
    let heads = trace.header.head_count();
    let mut seen = vec![false; heads * k.len()];
    for rec in &trace.steps[steps] {
        let Some(tok) = k.position(&rec.token, matching) else {
            continue;
        };
        for (h, a) in rec.heads.iter().enumerate() {
            if let Some(j) = a.position() {
                if !seen[h * k.len() + tok] && accept(&rec.token, j) {
                    seen[h * k.len() + tok] = true;
                }
            }
        }
    }
    seen
}

fn evidence_mask(trace: &AttentionTrace, evidence: &EvidenceSet) -> Result<Vec<bool>, ScoringError> {
    if evidence.is_empty() {
        return Err(ScoringError::EmptyEvidence);
    }
    let layout = &trace.header.layout;
    let mut mask = vec![false; layout.total_len];
    for &g in &evidence.indices {
        if !layout.is_image_token(g) {
            return Err(ScoringError::EvidenceOutsideImages(g));
        }
        mask[g] = true;
    }
    Ok(mask)
}

/// OCR score of every head: answer tokens generated while the head's
/// argmax sat on an evidence patch token.
pub fn ocr_score_instance(
    trace: &AttentionTrace,
    evidence: &EvidenceSet,
    k: &AnswerTokens,
    opts: &ScoringOptions,
) -> Result<ScoreMatrix, ScoringError> {
    let mask = evidence_mask(trace, evidence)?;
    let seen = collect_hits(trace, 0..trace.steps.len(), k, opts.token_match, |_, j| {
        mask.get(j).copied().unwrap_or(false)
    });
    Ok(matrix(trace, ScoreKind::Ocr, k, &seen))
}

/// Retrieval score of every head: answer tokens `w` generated while the
/// head's argmax sat on an input token whose text equals `w`.
///
/// `answer_positions` is only consulted with `opts.positional_retrieval`.
pub fn retrieval_score_instance(
    trace: &AttentionTrace,
    answer_positions: &[usize],
    k: &AnswerTokens,
    opts: &ScoringOptions,
) -> Result<ScoreMatrix, ScoringError> {
    if trace.header.input_token_texts.is_none() {
        return Err(ScoringError::MissingInputTexts);
    }
    if opts.positional_retrieval && answer_positions.is_empty() {
        return Err(ScoringError::NoAnswerPositions);
    }
    let allowed: BTreeSet<usize> = answer_positions.iter().copied().collect();
    let input_len = trace.header.input_len();
    let m = opts.token_match;
    let seen = collect_hits(trace, 0..trace.steps.len(), k, m, |w, j| {
        j < input_len
            && (!opts.positional_retrieval || allowed.contains(&j))
            && trace.context_text(j).is_some_and(|x| m.normalize(x) == m.normalize(w))
    });
    Ok(matrix(trace, ScoreKind::Retrieval, k, &seen))
}

/// Input positions whose token text is an answer token.
pub fn answer_positions(trace: &AttentionTrace, k: &AnswerTokens, matching: TokenMatch) -> Vec<usize> {
    trace
        .header
        .input_token_texts
        .iter()
        .flatten()
        .enumerate()
        .filter(|(_, t)| k.position(t, matching).is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Chain-of-thought scoring: OCR score over the reasoning segment, and
/// retrieval score of the answer segment copying from the reasoning tokens.
pub fn cot_dual_score(
    trace: &AttentionTrace,
    evidence: &EvidenceSet,
    k: &AnswerTokens,
    opts: &ScoringOptions,
) -> Result<(ScoreMatrix, ScoreMatrix), ScoringError> {
    let seg = trace.header.generation_segments.ok_or(ScoringError::MissingSegments)?;
    if !trace.header.causal_context {
        return Err(ScoringError::NonCausalTrace);
    }
    let reasoning = trace.slice_generation(seg.reasoning)?;
    let ocr = ocr_score_instance(&reasoning, evidence, k, opts)?;

    let m = opts.token_match;
    let base = trace.header.input_len() + trace.header.generation_offset;
    let reasoning_positions = (base + seg.reasoning.start)..(base + seg.reasoning.end);
    trace.slice_generation(seg.answer)?;
    let seen = collect_hits(trace, seg.answer.range(), k, m, |w, j| {
        reasoning_positions.contains(&j) && trace.context_text(j).is_some_and(|x| m.normalize(x) == m.normalize(w))
    });
    let mut retrieval = matrix(trace, ScoreKind::Retrieval, k, &seen);
    retrieval.instance_id = trace.header.trace_id.clone();
    Ok((ocr, retrieval))
}

/// Cross-instance statistics for one head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAggregate {
    pub head: HeadId,
    /// Exact sum of per-instance scores.
    #[serde(with = "exact_str")]
    pub score_sum: Exact,
    #[serde(with = "exact_str")]
    pub max_score: Exact,
    pub hit_count: u64,
}

/// Mergeable accumulator behind [`AggregateScores`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScores {
    pub kind: ScoreKind,
    pub num_layers: u32,
    pub num_heads: u32,
    pub num_instances: u64,
    pub hit_threshold: f64,
    pub heads: Vec<HeadAggregate>,
}

impl AggregateScores {
    pub fn empty(kind: ScoreKind, num_layers: u32, num_heads: u32, hit_threshold: f64) -> Self {
        Self {
            kind,
            num_layers,
            num_heads,
            num_instances: 0,
            hit_threshold,
            heads: all_heads(num_layers, num_heads)
                .map(|head| HeadAggregate {
                    head,
                    score_sum: Exact::from_integer(0),
                    max_score: Exact::from_integer(0),
                    hit_count: 0,
                })
                .collect(),
        }
    }

    fn check_compatible(&self, kind: ScoreKind, shape: (u32, u32)) -> Result<(), ScoringError> {
        if kind != self.kind {
            return Err(ScoringError::MixedKinds(self.kind, kind));
        }
        if shape != (self.num_layers, self.num_heads) {
            return Err(ScoringError::ShapeMismatch {
                expected: (self.num_layers, self.num_heads),
                found: shape,
            });
        }
        Ok(())
    }

    pub fn push(&mut self, m: &ScoreMatrix) -> Result<(), ScoringError> {
        self.check_compatible(m.kind, (m.num_layers, m.num_heads))?;
        let denom = m.denom();
        if denom == 0 {
            return Err(ScoringError::EmptyAnswer);
        }
        for (agg, &hits) in self.heads.iter_mut().zip(&m.hits) {
            let r = Exact::new(hits as u128, denom as u128);
            agg.score_sum = checked_add(agg.score_sum, r)?;
            agg.max_score = agg.max_score.max(r);
            if hits as f64 / denom as f64 > self.hit_threshold {
                agg.hit_count += 1;
            }
        }
        self.num_instances += 1;
        Ok(())
    }

    /// Combines two partial aggregates (e.g. from parallel shards).
    pub fn merge(&mut self, other: &AggregateScores) -> Result<(), ScoringError> {
        self.check_compatible(other.kind, (other.num_layers, other.num_heads))?;
        if other.hit_threshold != self.hit_threshold {
            return Err(ScoringError::ThresholdMismatch {
                built: self.hit_threshold,
                requested: other.hit_threshold,
            });
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.score_sum = checked_add(a.score_sum, b.score_sum)?;
            a.max_score = a.max_score.max(b.max_score);
            a.hit_count += b.hit_count;
        }
        self.num_instances += other.num_instances;
        Ok(())
    }

    pub fn get(&self, head: HeadId) -> &HeadAggregate {
        &self.heads[head.flat(self.num_heads)]
    }

    /// Exact mean over all instances, zeros included.
    pub fn mean_exact(&self, head: HeadId) -> Exact {
        if self.num_instances == 0 {
            return Exact::from_integer(0);
        }
        self.get(head).score_sum / Exact::from_integer(self.num_instances as u128)
    }

    pub fn mean(&self, head: HeadId) -> f64 {
        to_f64(self.mean_exact(head))
    }

    pub fn activation_frequency(&self, head: HeadId) -> f64 {
        if self.num_instances == 0 {
            return 0.0;
        }
        self.get(head).hit_count as f64 / self.num_instances as f64
    }

    pub fn means(&self) -> Vec<f64> {
        all_heads(self.num_layers, self.num_heads)
            .map(|h| self.mean(h))
            .collect()
    }
}

fn checked_add(a: Exact, b: Exact) -> Result<Exact, ScoringError> {
    use num_rational::Ratio;
    // Ratio's Add may overflow internally; go through checked integer ops.
    let (an, ad, bn, bd) = (*a.numer(), *a.denom(), *b.numer(), *b.denom());
    let g = gcd(ad, bd);
    let l = ad.checked_mul(bd / g).ok_or(ScoringError::Overflow)?;
    let n = an
        .checked_mul(l / ad)
        .and_then(|x| bn.checked_mul(l / bd).and_then(|y| x.checked_add(y)))
        .ok_or(ScoringError::Overflow)?;
    Ok(Ratio::new(n, l))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `"n/d"` text form of exact ratios in files.
pub mod exact_str {
    use super::Exact;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn format(r: &Exact) -> String {
        format!("{}/{}", r.numer(), r.denom())
    }

    pub fn parse(s: &str) -> Result<Exact, String> {
        let (n, d) = s.split_once('/').ok_or_else(|| format!("expected n/d, got {s:?}"))?;
        let n: u128 = n.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        let d: u128 = d.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
        if d == 0 {
            return Err(format!("{s:?}: zero denominator"));
        }
        Ok(Exact::new(n, d))
    }

    pub fn serialize<S: Serializer>(r: &Exact, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Exact, D::Error> {
        parse(&String::deserialize(d)?).map_err(D::Error::custom)
    }
}

pub fn to_f64(r: Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Aggregates per-instance matrices; `hit_threshold` defines a hit (`score > threshold`).
pub fn aggregate(matrices: &[ScoreMatrix], hit_threshold: f64) -> Result<AggregateScores, ScoringError> {
    let first = matrices.first().ok_or(ScoringError::EmptyInput)?;
    let mut agg = AggregateScores::empty(first.kind, first.num_layers, first.num_heads, hit_threshold);
    for m in matrices {
        agg.push(m)?;
    }
    Ok(agg)
}

/// Thresholds of the OCR-head criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcrCriteria {
    /// A head scores a hit on an instance when its score exceeds this.
    pub per_instance_threshold: f64,
    /// Required fraction of instances with a hit (inclusive).
    pub min_hit_fraction: f64,
    /// Required mean score (exclusive).
    pub mean_threshold: f64,
}

impl Default for OcrCriteria {
    fn default() -> Self {
        Self {
            per_instance_threshold: 0.1,
            min_hit_fraction: 0.10,
            mean_threshold: 0.1,
        }
    }
}

/// Heads with a hit in at least `min_hit_fraction` of instances and a mean
/// score above `mean_threshold`.
pub fn detect_ocr_heads(agg: &AggregateScores, criteria: &OcrCriteria) -> Result<BTreeSet<HeadId>, ScoringError> {
    if agg.num_instances == 0 {
        return Err(ScoringError::EmptyInput);
    }
    if agg.hit_threshold != criteria.per_instance_threshold {
        return Err(ScoringError::ThresholdMismatch {
            built: agg.hit_threshold,
            requested: criteria.per_instance_threshold,
        });
    }
    Ok(all_heads(agg.num_layers, agg.num_heads)
        .filter(|&h| agg.activation_frequency(h) >= criteria.min_hit_fraction && agg.mean(h) > criteria.mean_threshold)
        .collect())
}

/// Heads whose mean score exceeds `mean_threshold`.
pub fn detect_retrieval_heads(agg: &AggregateScores, mean_threshold: f64) -> Result<BTreeSet<HeadId>, ScoringError> {
    if agg.num_instances == 0 {
        return Err(ScoringError::EmptyInput);
    }
    Ok(all_heads(agg.num_layers, agg.num_heads)
        .filter(|&h| agg.mean(h) > mean_threshold)
        .collect())
}

/// The `k` heads with the highest exact mean; ties go to the lower `(layer, head)`.
pub fn top_k_heads(agg: &AggregateScores, k: usize) -> Result<Vec<HeadId>, ScoringError> {
    let available = agg.heads.len();
    if k > available {
        return Err(ScoringError::KTooLarge { k, available });
    }
    let mut ranked: Vec<(Exact, HeadId)> = all_heads(agg.num_layers, agg.num_heads)
        .map(|h| (agg.mean_exact(h), h))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, h)| h).collect())
}

/// Top-`k` heads of a single instance's matrix, same tie rule.
pub fn top_k_instance(m: &ScoreMatrix, k: usize) -> Result<Vec<HeadId>, ScoringError> {
    let mut agg = AggregateScores::empty(m.kind, m.num_layers, m.num_heads, 0.0);
    agg.push(m)?;
    top_k_heads(&agg, k)
}

/// Convenience used by callers that score one span of a trace.
pub fn ocr_score_span(
    trace: &AttentionTrace,
    span: StepSpan,
    evidence: &EvidenceSet,
    k: &AnswerTokens,
    opts: &ScoringOptions,
) -> Result<ScoreMatrix, ScoringError> {
    ocr_score_instance(&trace.slice_generation(span)?, evidence, k, opts)
}
