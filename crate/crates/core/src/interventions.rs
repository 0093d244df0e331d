// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-row rewrites on dense traces: head masking and proportional
//! redistribution of attention-sink mass.
//!
//! An [`InterventionPlan`] is also the declarative file a model adapter
//! executes in-model, so trace-level and in-model runs share one description.
//!
//! Redistribution for a row `A` with sink position `s`, sink mass
//! `S = A[s]` and non-sink mass `M = sum_{t != s} A[t]`:
//!
//! ```text
//! A'[t] = A[t] + beta * S * A[t] / M       for t != s
//! A'[s] = (1 - beta) * S                   (scale_down)
//! A'[s] = S                                (leave_unchanged)
//! ```

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{all_heads, HeadId};
use crate::trace::{row_argmax, AttentionTrace, HeadArgmax, TraceError};

/// Redistribution strength used unless configured otherwise.
pub const DEFAULT_BETA: f64 = 0.4;
/// Number of top-scoring heads redistributed in the standard preset.
pub const REDISTRIBUTE_TOP_K: usize = 4;
/// Head counts of the standard masking sweep.
pub const MASK_SWEEP_COUNTS: [usize; 3] = [5, 10, 20];
/// Seeds of the five random-head baselines in the masking sweep.
pub const RANDOM_MASK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("intervention plan lists no heads")]
    EmptyPlan,
    #[error("beta {0} outside [0, 1]")]
    BetaOutOfRange(f64),
    #[error("head {head} does not exist in a {layers}x{heads} model")]
    UnknownHead { head: HeadId, layers: u32, heads: u32 },
    #[error("sink index {sink} outside input length {len}")]
    SinkOutOfRange { sink: usize, len: usize },
    #[error("plan kind {found:?} cannot be applied by {op}")]
    WrongKind { found: InterventionKind, op: &'static str },
    #[error("cannot pick {count} heads from {available}")]
    CountTooLarge { count: usize, available: usize },
    #[error("duplicate head {0} in plan")]
    DuplicateHead(HeadId),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Mask,
    Redistribute,
}

/// What happens to the sink entry after its mass is shared out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkUpdateRule {
    /// Sink keeps `(1 - beta) * S`; row sums are preserved.
    #[default]
    ScaleDown,
    /// Sink keeps `S`; rows gain `beta * S` of mass.
    LeaveUnchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub kind: InterventionKind,
    pub heads: Vec<HeadId>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub sink_index: usize,
    #[serde(default)]
    pub sink_update_rule: SinkUpdateRule,
    /// Free-form provenance, e.g. `"top-5 ocr"` or `"random seed 3"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl InterventionPlan {
    pub fn mask(heads: Vec<HeadId>) -> Self {
        Self {
            kind: InterventionKind::Mask,
            heads,
            beta: DEFAULT_BETA,
            sink_index: 0,
            sink_update_rule: SinkUpdateRule::default(),
            label: None,
        }
    }

    pub fn redistribute(heads: Vec<HeadId>, beta: f64, rule: SinkUpdateRule) -> Self {
        Self {
            kind: InterventionKind::Redistribute,
            heads,
            beta,
            sink_index: 0,
            sink_update_rule: rule,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Model-independent invariants.
    pub fn validate(&self) -> Result<(), InterventionError> {
        if self.heads.is_empty() {
            return Err(InterventionError::EmptyPlan);
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(InterventionError::BetaOutOfRange(self.beta));
        }
        let mut seen = BTreeSet::new();
        for h in &self.heads {
            if !seen.insert(*h) {
                return Err(InterventionError::DuplicateHead(*h));
            }
        }
        Ok(())
    }

    /// Invariants against a concrete trace shape.
    pub fn validate_for(&self, trace: &AttentionTrace) -> Result<(), InterventionError> {
        self.validate()?;
        let h = &trace.header;
        if let Some(bad) = self.heads.iter().find(|x| !x.within(h.num_layers, h.num_heads)) {
            return Err(InterventionError::UnknownHead {
                head: *bad,
                layers: h.num_layers,
                heads: h.num_heads,
            });
        }
        if self.sink_index >= h.input_len() {
            return Err(InterventionError::SinkOutOfRange {
                sink: self.sink_index,
                len: h.input_len(),
            });
        }
        Ok(())
    }
}

/// Outcome of rewriting one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Redistribution {
    pub row: Vec<f64>,
    /// Set when the row had no non-sink mass; `row` is then the input unchanged.
    pub degenerate: bool,
}

/// Moves `beta * S` of sink mass onto non-sink entries in proportion to
/// their current weight.
pub fn redistribute_row(row: &[f64], beta: f64, sink_index: usize, rule: SinkUpdateRule) -> Redistribution {
    let sink = row.get(sink_index).copied().unwrap_or(0.0);
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != sink_index)
        .map(|(_, v)| v)
        .sum();
    if rest <= 0.0 || sink_index >= row.len() {
        return Redistribution {
            row: row.to_vec(),
            degenerate: true,
        };
    }
    let gain = beta * sink / rest;
    let row = row
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if i != sink_index {
                a + gain * a
            } else {
                match rule {
                    SinkUpdateRule::ScaleDown => (1.0 - beta) * sink,
                    SinkUpdateRule::LeaveUnchanged => sink,
                }
            }
        })
        .collect();
    Redistribution { row, degenerate: false }
}

/// Counts reported by trace-level interventions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub rows_modified: usize,
    pub degenerate_rows: usize,
}

fn record_plan(trace: &mut AttentionTrace, plan: &InterventionPlan) {
    if !trace.header.interventions.contains(plan) {
        trace.header.interventions.push(plan.clone());
    }
}

fn dense_rows_mut<'a>(
    trace: &'a mut AttentionTrace,
    plan: &'a InterventionPlan,
) -> impl Iterator<Item = (&'a mut HeadArgmax, &'a mut [f32])> + 'a {
    let num_heads = trace.header.num_heads;
    let header = trace.header.clone();
    let flats: BTreeSet<usize> = plan.heads.iter().map(|h| h.flat(num_heads)).collect();
    trace.steps.iter_mut().enumerate().flat_map(move |(s, rec)| {
        let ctx = header.context_len(s).max(1);
        let dense = rec.dense.as_mut().expect("dense fidelity checked");
        let flats = flats.clone();
        rec.heads
            .iter_mut()
            .zip(dense.chunks_exact_mut(ctx))
            .enumerate()
            .filter(move |(i, _)| flats.contains(i))
            .map(|(_, pair)| pair)
    })
}

/// Applies a redistribution plan to every step of every planned head.
/// Other heads are left bit-identical; argmax fields of modified rows are
/// recomputed.
pub fn apply_redistribution(
    trace: &AttentionTrace,
    plan: &InterventionPlan,
) -> Result<(AttentionTrace, InterventionReport), InterventionError> {
    if plan.kind != InterventionKind::Redistribute {
        return Err(InterventionError::WrongKind {
            found: plan.kind,
            op: "apply_redistribution",
        });
    }
    if !trace.is_dense() {
        return Err(TraceError::RequiresDense.into());
    }
    plan.validate_for(trace)?;
    let mut out = trace.clone();
    let mut report = InterventionReport::default();
    for (argmax, row) in dense_rows_mut(&mut out, plan) {
        let wide: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let r = redistribute_row(&wide, plan.beta, plan.sink_index, plan.sink_update_rule);
        if r.degenerate {
            report.degenerate_rows += 1;
            continue;
        }
        for (dst, v) in row.iter_mut().zip(&r.row) {
            *dst = *v as f32;
        }
        *argmax = row_argmax(row).unwrap_or(HeadArgmax::MASKED);
        report.rows_modified += 1;
    }
    record_plan(&mut out, plan);
    Ok((out, report))
}

/// Zeroes every attention row of the planned heads and marks their argmax
/// invalid. In-model, the equivalent is zeroing the head's attention output.
pub fn mask_rows(
    trace: &AttentionTrace,
    plan: &InterventionPlan,
) -> Result<(AttentionTrace, InterventionReport), InterventionError> {
    if plan.kind != InterventionKind::Mask {
        return Err(InterventionError::WrongKind {
            found: plan.kind,
            op: "mask_rows",
        });
    }
    if !trace.is_dense() {
        return Err(TraceError::RequiresDense.into());
    }
    plan.validate_for(trace)?;
    let mut out = trace.clone();
    let mut report = InterventionReport::default();
    for (argmax, row) in dense_rows_mut(&mut out, plan) {
        row.fill(0.0);
        *argmax = HeadArgmax::MASKED;
        report.rows_modified += 1;
    }
    record_plan(&mut out, plan);
    Ok((out, report))
}

/// `count` distinct heads drawn uniformly from an `num_layers x num_heads`
/// model, deterministic in `seed`. Heads are returned in layer-major order.
pub fn random_head_plan(
    num_layers: u32,
    num_heads: u32,
    count: usize,
    seed: u64,
) -> Result<InterventionPlan, InterventionError> {
    let total = num_layers as usize * num_heads as usize;
    if count > total {
        return Err(InterventionError::CountTooLarge {
            count,
            available: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, total, count).into_vec();
    picked.sort_unstable();
    let heads = picked.into_iter().map(|i| HeadId::from_flat(i, num_heads)).collect();
    Ok(InterventionPlan::mask(heads).with_label(format!("random seed {seed}")))
}

/// Mask plan covering every head of the model.
pub fn mask_all_plan(num_layers: u32, num_heads: u32) -> InterventionPlan {
    InterventionPlan::mask(all_heads(num_layers, num_heads).collect())
}
