// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use super::{row_argmax, AttentionTrace, Fidelity, TraceError};
use crate::heads::HeadId;
use crate::interventions::{InterventionKind, SinkUpdateRule};

/// Allowed deviation of a dense row's sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Slack on argmax weights above 1 from f32 rounding.
const VALUE_SLACK: f32 = 1e-6;

/// Per-head row constraints implied by interventions recorded in the header.
struct HeadRules {
    masked: BTreeSet<usize>,
    /// Extra mass a head's rows may carry (sum of `beta` over
    /// `leave_unchanged` redistributions).
    extra_mass: BTreeMap<usize, f64>,
}

fn rules(trace: &AttentionTrace) -> Result<HeadRules, TraceError> {
    let h = &trace.header;
    let mut masked = BTreeSet::new();
    let mut extra_mass = BTreeMap::new();
    for (i, plan) in h.interventions.iter().enumerate() {
        let path = format!("header.interventions[{i}]");
        plan.validate()
            .map_err(|e| TraceError::violation(&path, e.to_string()))?;
        if plan.sink_index >= h.input_len() {
            return Err(TraceError::violation(
                format!("{path}.sink_index"),
                format!("{} >= input length {}", plan.sink_index, h.input_len()),
            ));
        }
        for (j, head) in plan.heads.iter().enumerate() {
            if !head.within(h.num_layers, h.num_heads) {
                return Err(TraceError::violation(
                    format!("{path}.heads[{j}]"),
                    format!("{head} outside {}x{}", h.num_layers, h.num_heads),
                ));
            }
            let flat = head.flat(h.num_heads);
            match plan.kind {
                InterventionKind::Mask => {
                    masked.insert(flat);
                }
                InterventionKind::Redistribute if plan.sink_update_rule == SinkUpdateRule::LeaveUnchanged => {
                    *extra_mass.entry(flat).or_insert(0.0) += plan.beta;
                }
                InterventionKind::Redistribute => {}
            }
        }
    }
    Ok(HeadRules { masked, extra_mass })
}

/// Checks every structural invariant; the error names the first offending field.
pub fn validate(trace: &AttentionTrace) -> Result<(), TraceError> {
    let h = &trace.header;
    if h.num_layers == 0 {
        return Err(TraceError::violation("header.num_layers", "must be >= 1"));
    }
    if h.num_heads == 0 {
        return Err(TraceError::violation("header.num_heads", "must be >= 1"));
    }
    h.layout
        .validate()
        .map_err(|e| TraceError::violation("header.layout", e.to_string()))?;
    if let Some(texts) = &h.input_token_texts {
        if texts.len() != h.input_len() {
            return Err(TraceError::violation(
                "header.input_token_texts",
                format!("{} entries for input length {}", texts.len(), h.input_len()),
            ));
        }
    }
    if let Some(seg) = &h.generation_segments {
        let n = trace.steps.len();
        for (name, span) in [("reasoning", seg.reasoning), ("answer", seg.answer)] {
            if span.start > span.end || span.end > n {
                return Err(TraceError::violation(
                    format!("header.generation_segments.{name}"),
                    format!("{}..{} outside {n} steps", span.start, span.end),
                ));
            }
        }
        if seg.reasoning.start < seg.answer.end && seg.answer.start < seg.reasoning.end {
            return Err(TraceError::violation("header.generation_segments", "segments overlap"));
        }
    }
    let rules = rules(trace)?;

    let heads = h.head_count();
    for (s, rec) in trace.steps.iter().enumerate() {
        let path = format!("steps[{s}]");
        if rec.step != s {
            return Err(TraceError::violation(
                format!("{path}.step"),
                format!("expected {s}, found {}", rec.step),
            ));
        }
        if rec.heads.len() != heads {
            return Err(TraceError::violation(
                format!("{path}.argmax"),
                format!("{} entries for {heads} heads", rec.heads.len()),
            ));
        }
        let ctx = h.context_len(s);
        for (i, a) in rec.heads.iter().enumerate() {
            let hp = || format!("{path}.argmax[{i}] ({})", HeadId::from_flat(i, h.num_heads));
            match a.index {
                None if !rules.masked.contains(&i) => {
                    return Err(TraceError::violation(hp(), "missing argmax on an unmasked head"));
                }
                None if a.value != 0.0 => {
                    return Err(TraceError::violation(hp(), "masked head must carry value 0"));
                }
                Some(j) if j as usize >= ctx => {
                    return Err(TraceError::violation(
                        hp(),
                        format!("index {j} >= context length {ctx}"),
                    ));
                }
                _ => {}
            }
            if !a.value.is_finite() || a.value < 0.0 || a.value > 1.0 + VALUE_SLACK {
                return Err(TraceError::violation(hp(), format!("value {} outside [0, 1]", a.value)));
            }
        }

        match (trace.fidelity, &rec.dense) {
            (Fidelity::ArgmaxOnly, Some(_)) => {
                return Err(TraceError::violation(
                    format!("{path}.dense"),
                    "dense rows in an argmax_only trace",
                ));
            }
            (Fidelity::Dense, None) => {
                return Err(TraceError::violation(
                    format!("{path}.dense"),
                    "missing rows in a dense trace",
                ));
            }
            (Fidelity::ArgmaxOnly, None) => {}
            (Fidelity::Dense, Some(dense)) => {
                if dense.len() != heads * ctx {
                    return Err(TraceError::violation(
                        format!("{path}.dense"),
                        format!("{} values, expected {heads} rows of {ctx}", dense.len()),
                    ));
                }
                for (i, row) in dense.chunks_exact(ctx.max(1)).enumerate().take(heads) {
                    check_row(&path, i, row, rec.heads[i], &rules, h.num_heads)?;
                }
            }
        }
    }
    Ok(())
}

fn check_row(
    path: &str,
    i: usize,
    row: &[f32],
    stored: super::HeadArgmax,
    rules: &HeadRules,
    num_heads: u32,
) -> Result<(), TraceError> {
    let rp = || format!("{path}.dense[{i}] ({})", HeadId::from_flat(i, num_heads));
    if let Some(bad) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(TraceError::violation(rp(), format!("entry {bad} is {}", row[bad])));
    }
    let sum: f64 = row.iter().map(|&v| v as f64).sum();
    if rules.masked.contains(&i) && stored.index.is_none() {
        if sum != 0.0 {
            return Err(TraceError::violation(rp(), "masked row is not all-zero"));
        }
        return Ok(());
    }
    let extra = rules.extra_mass.get(&i).copied().unwrap_or(0.0);
    if sum < 1.0 - ROW_SUM_TOLERANCE || sum > 1.0 + extra + ROW_SUM_TOLERANCE {
        return Err(TraceError::violation(
            rp(),
            format!("row sums to {sum}, not 1 (post-softmax probabilities expected)"),
        ));
    }
    let truth = row_argmax(row);
    if truth.map(|t| (t.index, t.value.to_bits())) != Some((stored.index, stored.value.to_bits())) {
        return Err(TraceError::violation(
            rp(),
            format!(
                "stored argmax {:?}={} disagrees with row argmax {:?}",
                stored.index,
                stored.value,
                truth.map(|t| (t.index, t.value))
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::dense_trace;
    use super::super::{GenerationSegments, HeadArgmax, StepSpan};
    use super::*;

    fn sample() -> AttentionTrace {
        dense_trace(1, 2, &["4", "2"], &[vec![2, 3], vec![4, 5]])
    }

    fn path_of(err: TraceError) -> String {
        match err {
            TraceError::SchemaViolation { path, .. } => path,
            other => panic!("expected violation, got {other}"),
        }
    }

    #[test]
    fn accepts_well_formed() {
        validate(&sample()).unwrap();
        validate(&sample().compact().unwrap()).unwrap();
    }

    #[test]
    fn argmax_past_input_is_rejected() {
        let mut t = sample().compact().unwrap();
        t.steps[1].heads[0] = HeadArgmax::new(8, 0.5);
        assert_eq!(path_of(validate(&t).unwrap_err()), "steps[1].argmax[0] (L0H0)");
    }

    #[test]
    fn dense_argmax_mismatch_is_rejected() {
        let mut t = dense_trace(1, 1, &["x"], &[vec![0]]);
        // True argmax is position 1; the stored one claims position 2.
        let row: Vec<f32> = vec![0.1, 0.6, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
        t.steps[0].dense = Some(row);
        t.steps[0].heads[0] = HeadArgmax::new(2, 0.3);
        assert!(path_of(validate(&t).unwrap_err()).starts_with("steps[0].dense[0]"));
        t.steps[0].heads[0] = HeadArgmax::new(1, 0.6);
        validate(&t).unwrap();
    }

    #[test]
    fn logits_fail_the_sum_check() {
        let mut t = dense_trace(1, 1, &["x"], &[vec![0]]);
        t.steps[0].dense = Some(vec![3.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        t.steps[0].heads[0] = HeadArgmax::new(0, 3.0);
        assert!(validate(&t).is_err());
    }

    #[test]
    fn unmasked_missing_argmax_is_rejected() {
        let mut t = sample().compact().unwrap();
        t.steps[0].heads[1] = HeadArgmax::MASKED;
        assert_eq!(path_of(validate(&t).unwrap_err()), "steps[0].argmax[1] (L0H1)");
    }

    #[test]
    fn overlapping_segments_are_rejected() {
        let mut t = sample();
        t.header.generation_segments = Some(GenerationSegments {
            reasoning: StepSpan::new(0, 2),
            answer: StepSpan::new(1, 2),
        });
        assert_eq!(path_of(validate(&t).unwrap_err()), "header.generation_segments");
    }

    #[test]
    fn wrong_step_numbering() {
        let mut t = sample();
        t.steps[1].step = 5;
        assert_eq!(path_of(validate(&t).unwrap_err()), "steps[1].step");
    }

    #[test]
    fn input_text_count_must_match() {
        let mut t = sample();
        t.header.input_token_texts.as_mut().unwrap().pop();
        assert_eq!(path_of(validate(&t).unwrap_err()), "header.input_token_texts");
    }
}
