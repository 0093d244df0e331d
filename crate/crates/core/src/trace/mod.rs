// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention traces: the per-step, per-head attention evidence of one
//! generation run, and the on-disk formats shared with model adapters.
//!
//! Two fidelities exist. `argmax_only` stores, for every generated step and
//! every head, the input position with maximal attention and its weight;
//! that is all head scoring needs. `dense` additionally stores the full
//! post-softmax attention row, which interventions require.
//!
//! Argmax ties resolve to the lowest index everywhere in the toolkit.

mod binary;
mod text;
mod validate;

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::HeadId;
use crate::interventions::InterventionPlan;
use crate::patch::TokenLayout;

pub use binary::{decode_binary, encode_binary, MAGIC};
pub use text::{decode_text, encode_text};
pub use validate::{validate, ROW_SUM_TOLERANCE};

/// On-disk schema version written and accepted by this crate.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("unsupported trace schema version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("trace is already argmax-only")]
    AlreadyCompact,
    #[error("trace is argmax-only but this operation needs dense rows")]
    RequiresDense,
    #[error("span {start}..{end} outside generation of {len} steps")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TraceError {
    pub(crate) fn violation(path: impl Into<String>, reason: impl Into<String>) -> Self {
        TraceError::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    ArgmaxOnly,
    Dense,
}

/// Half-open range of generated-step indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpan {
    pub start: usize,
    pub end: usize,
}

impl StepSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reasoning and answer segments of a chain-of-thought generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSegments {
    pub reasoning: StepSpan,
    pub answer: StepSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub trace_id: String,
    pub model_id: String,
    pub num_layers: u32,
    pub num_heads: u32,
    pub layout: TokenLayout,
    #[serde(default)]
    pub input_token_texts: Option<Vec<String>>,
    pub answer: String,
    pub question: String,
    #[serde(default)]
    pub generation_segments: Option<GenerationSegments>,
    /// When set, step `s` may also attend to earlier generated tokens:
    /// its context is `layout.total_len + generation_offset + s` positions,
    /// generated token `g` sitting at position `layout.total_len + g`.
    #[serde(default)]
    pub causal_context: bool,
    /// Number of generated steps that precede step 0 (non-zero after slicing).
    #[serde(default)]
    pub generation_offset: usize,
    /// Interventions already applied to this trace, in order.
    #[serde(default)]
    pub interventions: Vec<InterventionPlan>,
}

impl TraceHeader {
    pub fn head_count(&self) -> usize {
        self.num_layers as usize * self.num_heads as usize
    }

    pub fn input_len(&self) -> usize {
        self.layout.total_len
    }

    /// Number of attendable positions at step `step`.
    pub fn context_len(&self, step: usize) -> usize {
        if self.causal_context {
            self.input_len() + self.generation_offset + step
        } else {
            self.input_len()
        }
    }
}

/// Argmax evidence for one head at one step. `index` is `None` only for
/// heads whose attention was masked out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(Option<u32>, f32)", into = "(Option<u32>, f32)")]
pub struct HeadArgmax {
    pub index: Option<u32>,
    pub value: f32,
}

impl HeadArgmax {
    pub const MASKED: HeadArgmax = HeadArgmax {
        index: None,
        value: 0.0,
    };

    pub fn new(index: usize, value: f32) -> Self {
        Self {
            index: Some(index as u32),
            value,
        }
    }

    pub fn position(&self) -> Option<usize> {
        self.index.map(|i| i as usize)
    }
}

impl From<(Option<u32>, f32)> for HeadArgmax {
    fn from((index, value): (Option<u32>, f32)) -> Self {
        Self { index, value }
    }
}

impl From<HeadArgmax> for (Option<u32>, f32) {
    fn from(a: HeadArgmax) -> Self {
        (a.index, a.value)
    }
}

/// Lowest-index argmax of a row; `None` for an empty or all-zero row.
pub fn row_argmax(row: &[f32]) -> Option<HeadArgmax> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    match best {
        Some((i, v)) if v > 0.0 => Some(HeadArgmax::new(i, v)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub token: String,
    pub token_id: Option<i64>,
    /// Layer-major, `num_layers * num_heads` entries.
    pub heads: Vec<HeadArgmax>,
    /// Layer-major concatenation of one attention row per head.
    pub dense: Option<Vec<f32>>,
}

impl StepRecord {
    pub fn argmax(&self, head: HeadId, num_heads: u32) -> HeadArgmax {
        self.heads[head.flat(num_heads)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    pub fidelity: Fidelity,
    pub steps: Vec<StepRecord>,
}

/// Container flavour on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    Binary,
    Jsonl,
}

impl AttentionTrace {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn is_dense(&self) -> bool {
        self.fidelity == Fidelity::Dense
    }

    /// The attention row of `head` at `step`, if the trace is dense.
    pub fn row(&self, step: usize, head: HeadId) -> Option<&[f32]> {
        let rec = self.steps.get(step)?;
        let dense = rec.dense.as_ref()?;
        let len = self.header.context_len(step);
        let start = head.flat(self.header.num_heads) * len;
        dense.get(start..start + len)
    }

    /// Text of context position `position`, if known: an input token text or,
    /// under a causal context, a generated token of this trace.
    pub fn context_text(&self, position: usize) -> Option<&str> {
        let input_len = self.header.input_len();
        if position < input_len {
            return self
                .header
                .input_token_texts
                .as_ref()
                .and_then(|t| t.get(position))
                .map(String::as_str);
        }
        if !self.header.causal_context {
            return None;
        }
        let generated = position - input_len;
        let step = generated.checked_sub(self.header.generation_offset)?;
        self.steps.get(step).map(|s| s.token.as_str())
    }

    /// Drops dense rows, keeping argmax evidence.
    pub fn compact(&self) -> Result<AttentionTrace, TraceError> {
        if self.fidelity == Fidelity::ArgmaxOnly {
            return Err(TraceError::AlreadyCompact);
        }
        Ok(AttentionTrace {
            header: self.header.clone(),
            fidelity: Fidelity::ArgmaxOnly,
            steps: self
                .steps
                .iter()
                .map(|s| StepRecord {
                    dense: None,
                    ..s.clone()
                })
                .collect(),
        })
    }

    /// Restricts the trace to generated steps `span`, renumbered from 0.
    ///
    /// Segment annotations are dropped since they index the full generation.
    pub fn slice_generation(&self, span: StepSpan) -> Result<AttentionTrace, TraceError> {
        if span.start > span.end || span.end > self.steps.len() {
            return Err(TraceError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: self.steps.len(),
            });
        }
        let mut header = self.header.clone();
        header.generation_offset += span.start;
        header.generation_segments = None;
        let steps = self.steps[span.range()]
            .iter()
            .enumerate()
            .map(|(i, s)| StepRecord { step: i, ..s.clone() })
            .collect();
        Ok(AttentionTrace {
            header,
            fidelity: self.fidelity,
            steps,
        })
    }

    pub fn encode(&self, format: TraceFormat) -> Vec<u8> {
        match format {
            TraceFormat::Binary => encode_binary(self),
            TraceFormat::Jsonl => encode_text(self),
        }
    }

    /// Parses either container (sniffed from the leading bytes) and validates.
    pub fn decode(bytes: &[u8]) -> Result<AttentionTrace, TraceError> {
        let trace = if bytes.starts_with(MAGIC) {
            decode_binary(bytes)?
        } else {
            decode_text(bytes)?
        };
        validate(&trace)?;
        Ok(trace)
    }
}

/// Validates then writes `trace` to `path`.
pub fn write_trace(path: &Path, trace: &AttentionTrace, format: TraceFormat) -> Result<(), TraceError> {
    validate(trace)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&trace.encode(format))?;
    file.sync_all()?;
    Ok(())
}

/// Reads and validates a trace in either container format.
pub fn read_trace(path: &Path) -> Result<AttentionTrace, TraceError> {
    AttentionTrace::decode(&fs::read(path)?)
}
