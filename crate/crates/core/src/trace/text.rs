// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON trace variant, for small hand-written traces.
//!
//! Line 1 is `{"format":"ocrhead-trace","version":1,"fidelity":..,"num_steps":..,"header":{..}}`;
//! each following line is one step:
//! `{"step":0,"token":"4","token_id":17,"argmax":[[idx,value],..],"dense":[[..],..]}`
//! where a masked head's index is `null` and `dense` is omitted for argmax-only traces.

use serde::{Deserialize, Serialize};

use super::{AttentionTrace, Fidelity, HeadArgmax, StepRecord, TraceError, TraceHeader, SCHEMA_VERSION};

pub const TEXT_FORMAT_TAG: &str = "ocrhead-trace";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preamble {
    format: String,
    version: u32,
    fidelity: Fidelity,
    num_steps: usize,
    header: TraceHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    step: usize,
    token: String,
    #[serde(default)]
    token_id: Option<i64>,
    argmax: Vec<HeadArgmax>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dense: Option<Vec<Vec<f32>>>,
}

pub fn encode_text(trace: &AttentionTrace) -> Vec<u8> {
    let preamble = Preamble {
        format: TEXT_FORMAT_TAG.to_string(),
        version: SCHEMA_VERSION,
        fidelity: trace.fidelity,
        num_steps: trace.steps.len(),
        header: trace.header.clone(),
    };
    let mut out = serde_json::to_vec(&preamble).expect("preamble serializes");
    out.push(b'\n');
    for (s, rec) in trace.steps.iter().enumerate() {
        let ctx = trace.header.context_len(s).max(1);
        let line = StepLine {
            step: rec.step,
            token: rec.token.clone(),
            token_id: rec.token_id,
            argmax: rec.heads.clone(),
            dense: rec.dense.as_ref().map(|d| d.chunks(ctx).map(<[f32]>::to_vec).collect()),
        };
        serde_json::to_writer(&mut out, &line).expect("step serializes");
        out.push(b'\n');
    }
    out
}

pub fn decode_text(bytes: &[u8]) -> Result<AttentionTrace, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::violation("file", format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| TraceError::violation("line 1", "empty trace file"))?;

    let raw: serde_json::Value =
        serde_json::from_str(first).map_err(|e| TraceError::violation("line 1", e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(TEXT_FORMAT_TAG) {
        return Err(TraceError::violation(
            "line 1.format",
            format!("expected {TEXT_FORMAT_TAG:?}"),
        ));
    }
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != SCHEMA_VERSION as u64 {
            return Err(TraceError::VersionMismatch {
                found: v as u32,
                supported: SCHEMA_VERSION,
            });
        }
    }
    let pre: Preamble = serde_json::from_value(raw).map_err(|e| TraceError::violation("line 1", e.to_string()))?;

    let mut steps = Vec::with_capacity(pre.num_steps);
    for (n, line) in lines {
        let s = steps.len();
        let parsed: StepLine = serde_json::from_str(line)
            .map_err(|e| TraceError::violation(format!("steps[{s}] (line {})", n + 1), e.to_string()))?;
        let dense = match (pre.fidelity, parsed.dense) {
            (Fidelity::Dense, Some(rows)) => {
                let ctx = pre.header.context_len(s);
                if let Some(bad) = rows.iter().position(|r| r.len() != ctx) {
                    return Err(TraceError::violation(
                        format!("steps[{s}].dense[{bad}]"),
                        format!("row of {} values, context length is {ctx}", rows[bad].len()),
                    ));
                }
                Some(rows.concat())
            }
            (Fidelity::Dense, None) => {
                return Err(TraceError::violation(
                    format!("steps[{s}].dense"),
                    "missing rows in a dense trace",
                ))
            }
            (Fidelity::ArgmaxOnly, Some(_)) => {
                return Err(TraceError::violation(
                    format!("steps[{s}].dense"),
                    "dense rows in an argmax_only trace",
                ))
            }
            (Fidelity::ArgmaxOnly, None) => None,
        };
        steps.push(StepRecord {
            step: parsed.step,
            token: parsed.token,
            token_id: parsed.token_id,
            heads: parsed.argmax,
            dense,
        });
    }
    if steps.len() != pre.num_steps {
        return Err(TraceError::violation(
            format!("steps[{}]", steps.len()),
            format!("file has {} steps, preamble declares {}", steps.len(), pre.num_steps),
        ));
    }
    Ok(AttentionTrace {
        header: pre.header,
        fidelity: pre.fidelity,
        steps,
    })
}
