// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic traces with planted head behaviour, and a brute-force scorer
//! written independently of [`crate::scoring`].
//!
//! A plant fixes, for chosen heads, how many distinct answer tokens the head
//! "reads" from evidence patches (OCR) or copies from matching input text
//! (retrieval). Every other `(head, step)` argmax lands on a neutral
//! position: neither evidence nor an answer-text token.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::HeadId;
use crate::patch::{EvidenceSet, OverlapMode, PatchGrid, TokenLayout};
use crate::scoring::{ScoreKind, ScoreMatrix};
use crate::trace::{row_argmax, AttentionTrace, Fidelity, HeadArgmax, StepRecord, TraceError, TraceHeader};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("infeasible plant: {0}")]
    InfeasiblePlant(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn infeasible(msg: impl Into<String>) -> OracleError {
    OracleError::InfeasiblePlant(msg.into())
}

/// Target per-instance score of one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPlant {
    pub head: HeadId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub trace_id: String,
    pub num_layers: u32,
    pub num_heads: u32,
    pub layout: TokenLayout,
    pub evidence: BTreeSet<usize>,
    /// Distinct answer tokens `k`.
    pub answer_tokens: Vec<String>,
    /// Generated token at every step; must contain each answer token.
    pub generated: Vec<String>,
    pub ocr_plants: Vec<HeadPlant>,
    pub retrieval_plants: Vec<HeadPlant>,
    /// Probability that a background argmax on an answer step lands on an
    /// evidence token instead of a neutral one.
    #[serde(default)]
    pub noise: f64,
    pub fidelity: Fidelity,
    pub seed: u64,
}

/// A planted trace plus everything needed to score it.
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub trace: AttentionTrace,
    pub evidence: EvidenceSet,
    /// Input positions holding answer-token text.
    pub answer_positions: Vec<usize>,
    pub expected_ocr: ScoreMatrix,
    pub expected_retrieval: ScoreMatrix,
}

/// Text of the input token at a non-image position without answer text.
fn neutral_text(position: usize) -> String {
    format!("<t{position}>")
}

const IMAGE_TEXT: &str = "<img>";

fn hits_for(score: f64, k: usize, head: HeadId) -> Result<usize, OracleError> {
    let raw = score * k as f64;
    let hits = raw.round();
    if !(0.0..=1.0).contains(&score) || (raw - hits).abs() > 1e-9 {
        return Err(infeasible(format!(
            "{head}: score {score} is not a multiple of 1/{k} in [0, 1]"
        )));
    }
    Ok(hits as usize)
}

/// Builds the planted trace. Answer tokens are placed as input text on the
/// last `|k|` text positions of the layout.
pub fn plant_trace(spec: &PlantSpec) -> Result<PlantedInstance, OracleError> {
    let heads = spec.num_layers as usize * spec.num_heads as usize;
    if heads == 0 {
        return Err(infeasible("no heads"));
    }
    spec.layout.validate().map_err(|e| infeasible(format!("layout: {e}")))?;
    let k: Vec<String> = {
        let set: BTreeSet<&String> = spec.answer_tokens.iter().collect();
        if set.len() != spec.answer_tokens.len() || set.is_empty() {
            return Err(infeasible("answer tokens must be distinct and nonempty"));
        }
        set.into_iter().cloned().collect()
    };
    let first_step: Vec<usize> = k
        .iter()
        .map(|w| {
            spec.generated
                .iter()
                .position(|g| g == w)
                .ok_or_else(|| infeasible(format!("answer token {w:?} is never generated")))
        })
        .collect::<Result<_, _>>()?;
    if spec.evidence.is_empty() {
        return Err(infeasible("evidence set is empty"));
    }
    if let Some(&bad) = spec.evidence.iter().find(|&&g| !spec.layout.is_image_token(g)) {
        return Err(infeasible(format!("evidence index {bad} is not an image token")));
    }

    let text_positions = spec.layout.text_positions();
    if text_positions.len() < k.len() {
        return Err(infeasible("fewer text positions than answer tokens"));
    }
    let answer_positions: Vec<usize> = text_positions[text_positions.len() - k.len()..].to_vec();
    let mut texts: Vec<String> = (0..spec.layout.total_len)
        .map(|g| {
            if spec.layout.is_image_token(g) {
                IMAGE_TEXT.into()
            } else {
                neutral_text(g)
            }
        })
        .collect();
    for (w, &p) in k.iter().zip(&answer_positions) {
        if w == IMAGE_TEXT || w.starts_with("<t") {
            return Err(infeasible(format!("answer token {w:?} collides with placeholder text")));
        }
        texts[p] = w.clone();
    }
    let reserved: BTreeSet<usize> = answer_positions.iter().copied().collect();
    let neutral: Vec<usize> = (0..spec.layout.total_len)
        .filter(|g| !spec.evidence.contains(g) && !reserved.contains(g))
        .collect();
    if neutral.is_empty() {
        return Err(infeasible("no neutral positions left"));
    }
    let evidence: Vec<usize> = spec.evidence.iter().copied().collect();

    // target[h][t]: what head h does on answer token t.
    #[derive(Clone, Copy, PartialEq)]
    enum Act {
        Background,
        Ocr,
        Retrieval,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut target = vec![Act::Background; heads * k.len()];
    let mut ocr_hits = vec![0usize; heads];
    let mut planted = vec![false; heads];
    for p in &spec.ocr_plants {
        if !p.head.within(spec.num_layers, spec.num_heads) {
            return Err(infeasible(format!("{} outside model", p.head)));
        }
        let h = p.head.flat(spec.num_heads);
        if planted[h] {
            return Err(infeasible(format!("{} planted twice for OCR", p.head)));
        }
        planted[h] = true;
        ocr_hits[h] = hits_for(p.score, k.len(), p.head)?;
    }
    let mut ret_hits = vec![0usize; heads];
    let mut ret_planted = vec![false; heads];
    for p in &spec.retrieval_plants {
        if !p.head.within(spec.num_layers, spec.num_heads) {
            return Err(infeasible(format!("{} outside model", p.head)));
        }
        let h = p.head.flat(spec.num_heads);
        if ret_planted[h] {
            return Err(infeasible(format!("{} planted twice for retrieval", p.head)));
        }
        ret_planted[h] = true;
        ret_hits[h] = hits_for(p.score, k.len(), p.head)?;
        if ocr_hits[h] + ret_hits[h] > k.len() {
            return Err(infeasible(format!(
                "{}: OCR and retrieval plants need more than |k| steps",
                p.head
            )));
        }
    }
    for h in 0..heads {
        let need = ocr_hits[h] + ret_hits[h];
        if need == 0 {
            continue;
        }
        let chosen = sample(&mut rng, k.len(), need).into_vec();
        for (n, t) in chosen.into_iter().enumerate() {
            target[h * k.len() + t] = if n < ocr_hits[h] { Act::Ocr } else { Act::Retrieval };
        }
    }
    let background_head: Vec<bool> = (0..heads).map(|h| !planted[h] && !ret_planted[h]).collect();

    let mut exp_ocr = vec![BTreeSet::new(); heads];
    let mut exp_ret = vec![BTreeSet::new(); heads];
    let input_len = spec.layout.total_len;
    let mut steps = Vec::with_capacity(spec.generated.len());
    for (s, tok) in spec.generated.iter().enumerate() {
        let t_idx = k.iter().position(|w| w == tok);
        let mut argmax = Vec::with_capacity(heads);
        let mut dense = (spec.fidelity == Fidelity::Dense).then(|| Vec::with_capacity(heads * input_len));
        for h in 0..heads {
            let act = match t_idx {
                Some(t) if first_step[t] == s => target[h * k.len() + t],
                _ => Act::Background,
            };
            let pos = match (act, t_idx) {
                (Act::Ocr, _) => evidence[rng.random_range(0..evidence.len())],
                (Act::Retrieval, Some(t)) => answer_positions[t],
                _ if t_idx.is_some() && background_head[h] && spec.noise > 0.0 && rng.random_bool(spec.noise) => {
                    evidence[rng.random_range(0..evidence.len())]
                }
                _ => neutral[rng.random_range(0..neutral.len())],
            };
            if let Some(t) = t_idx {
                if spec.evidence.contains(&pos) {
                    exp_ocr[h].insert(t);
                }
                if pos == answer_positions[t] {
                    exp_ret[h].insert(t);
                }
            }
            match dense.as_mut() {
                Some(d) => {
                    let row = peaked_row(&mut rng, input_len, pos, spec.layout.sink_index);
                    argmax.push(row_argmax(&row).expect("peaked row has a maximum"));
                    d.extend(row);
                }
                None => argmax.push(HeadArgmax::new(pos, rng.random_range(0.3f32..0.9))),
            }
        }
        steps.push(StepRecord {
            step: s,
            token: tok.clone(),
            token_id: None,
            heads: argmax,
            dense,
        });
    }

    let header = TraceHeader {
        trace_id: spec.trace_id.clone(),
        model_id: "toy-oracle".into(),
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        layout: spec.layout.clone(),
        input_token_texts: Some(texts),
        answer: k.concat(),
        question: "What is the pass key?".into(),
        generation_segments: None,
        causal_context: false,
        generation_offset: 0,
        interventions: vec![],
    };
    let trace = AttentionTrace {
        header,
        fidelity: spec.fidelity,
        steps,
    };
    let matrix = |kind, sets: &[BTreeSet<usize>]| ScoreMatrix {
        instance_id: spec.trace_id.clone(),
        kind,
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        answer_tokens: k.clone(),
        hits: sets.iter().map(|s| s.len() as u32).collect(),
    };
    Ok(PlantedInstance {
        expected_ocr: matrix(ScoreKind::Ocr, &exp_ocr),
        expected_retrieval: matrix(ScoreKind::Retrieval, &exp_ret),
        evidence: EvidenceSet {
            instance_id: spec.trace_id.clone(),
            indices: spec.evidence.clone(),
            threshold: 0.1,
            mode: OverlapMode::Iou,
        },
        answer_positions,
        trace,
    })
}

/// A normalized row whose unique maximum sits at `peak`; the sink gets a
/// large but smaller share.
fn peaked_row(rng: &mut ChaCha8Rng, len: usize, peak: usize, sink: usize) -> Vec<f32> {
    let mut w: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    if sink != peak && sink < len {
        w[sink] = rng.random_range(2.0..6.0);
    }
    w[peak] = 8.0 + rng.random_range(0.0..4.0);
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

/// Scores a dense trace straight from the definition: full row scans for
/// the argmax, then per-head set construction.
pub fn brute_force_score(
    trace: &AttentionTrace,
    evidence: &BTreeSet<usize>,
    k_tokens: &[String],
    kind: ScoreKind,
) -> Result<ScoreMatrix, OracleError> {
    if trace.fidelity != Fidelity::Dense {
        return Err(TraceError::RequiresDense.into());
    }
    let k: BTreeSet<&String> = k_tokens.iter().collect();
    let h = &trace.header;
    let input_len = h.layout.total_len;
    let text_at = |step_ctx_pos: usize| -> Option<&str> {
        if step_ctx_pos < input_len {
            h.input_token_texts.as_ref()?.get(step_ctx_pos).map(|s| s.as_str())
        } else if h.causal_context {
            let g = step_ctx_pos - input_len;
            if g < h.generation_offset {
                None
            } else {
                trace.steps.get(g - h.generation_offset).map(|s| s.token.as_str())
            }
        } else {
            None
        }
    };

    let mut hits = Vec::new();
    for layer in 0..h.num_layers {
        for head in 0..h.num_heads {
            let flat = (layer * h.num_heads + head) as usize;
            let mut g: BTreeSet<&str> = BTreeSet::new();
            for (s, rec) in trace.steps.iter().enumerate() {
                if !k.contains(&rec.token) {
                    continue;
                }
                let ctx = h.context_len(s);
                let dense = rec.dense.as_ref().ok_or(TraceError::RequiresDense)?;
                let row = &dense[flat * ctx..(flat + 1) * ctx];
                let mut best = 0usize;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if row.is_empty() || row[best] <= 0.0 {
                    continue;
                }
                let ok = match kind {
                    ScoreKind::Ocr => evidence.contains(&best),
                    ScoreKind::Retrieval => best < input_len && text_at(best) == Some(rec.token.as_str()),
                };
                if ok {
                    g.insert(rec.token.as_str());
                }
            }
            hits.push(g.len() as u32);
        }
    }
    Ok(ScoreMatrix {
        instance_id: h.trace_id.clone(),
        kind,
        num_layers: h.num_layers,
        num_heads: h.num_heads,
        answer_tokens: k.into_iter().cloned().collect(),
        hits,
    })
}

/// Upper bounds for [`random_dense_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomTraceLimits {
    pub max_layers: u32,
    pub max_heads: u32,
    pub max_images: usize,
    /// Longest image side, in patches.
    pub max_side: u32,
    pub max_steps: usize,
}

impl Default for RandomTraceLimits {
    fn default() -> Self {
        Self {
            max_layers: 4,
            max_heads: 4,
            max_images: 3,
            max_side: 3,
            max_steps: 8,
        }
    }
}

/// An unplanted dense trace with evidence and answer tokens to score it by.
#[derive(Debug, Clone)]
pub struct RandomTrace {
    pub trace: AttentionTrace,
    pub evidence: EvidenceSet,
    pub answer_tokens: Vec<String>,
}

const RANDOM_VOCAB: [&str; 6] = ["7", "3", "x", "key", " 7", "<img>"];

/// Draws a dense trace with no planted structure. Row weights come from a
/// handful of integer levels, so exact argmax ties are common; input texts
/// and generated tokens share a small vocabulary, so retrieval matches are
/// common too. About a third of traces use a causal context.
pub fn random_dense_trace(seed: u64, limits: &RandomTraceLimits) -> RandomTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_layers = rng.random_range(1..=limits.max_layers);
    let num_heads = rng.random_range(1..=limits.max_heads);
    let grids: Vec<PatchGrid> = (0..rng.random_range(1..=limits.max_images))
        .map(|_| {
            let w = rng.random_range(1..=limits.max_side) * 14;
            let h = rng.random_range(1..=limits.max_side) * 14;
            PatchGrid::new(w, h, 14).expect("multiples of the patch size")
        })
        .collect();
    let layout = TokenLayout::sequential(
        &grids,
        rng.random_range(1..4),
        rng.random_range(0..3),
        rng.random_range(1..6),
    );
    let input_len = layout.total_len;
    let texts: Vec<String> = (0..input_len)
        .map(|g| {
            if layout.is_image_token(g) {
                IMAGE_TEXT.to_string()
            } else {
                RANDOM_VOCAB[rng.random_range(0..RANDOM_VOCAB.len())].to_string()
            }
        })
        .collect();
    let image_positions: Vec<usize> = (0..input_len).filter(|&g| layout.is_image_token(g)).collect();
    let n_ev = rng.random_range(1..=image_positions.len());
    let evidence: BTreeSet<usize> = sample(&mut rng, image_positions.len(), n_ev)
        .into_iter()
        .map(|i| image_positions[i])
        .collect();
    let n_k = rng.random_range(1..=4);
    let answer_tokens: Vec<String> = {
        let mut v: Vec<String> = sample(&mut rng, RANDOM_VOCAB.len(), n_k)
            .into_iter()
            .map(|i| RANDOM_VOCAB[i].to_string())
            .collect();
        v.sort();
        v
    };
    let causal = rng.random_bool(1.0 / 3.0);
    let heads = (num_layers * num_heads) as usize;
    let n_steps = rng.random_range(1..=limits.max_steps);
    let mut steps = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let token = if rng.random_bool(0.7) {
            answer_tokens[rng.random_range(0..answer_tokens.len())].clone()
        } else {
            RANDOM_VOCAB[rng.random_range(0..RANDOM_VOCAB.len())].to_string()
        };
        let ctx = if causal { input_len + s } else { input_len };
        let mut dense = Vec::with_capacity(heads * ctx);
        let mut argmax = Vec::with_capacity(heads);
        for _ in 0..heads {
            let mut w: Vec<u32> = (0..ctx).map(|_| rng.random_range(0..4)).collect();
            // Occasionally a tie at the top between two positions.
            if ctx > 1 && rng.random_bool(0.3) {
                let a = rng.random_range(0..ctx);
                let b = rng.random_range(0..ctx);
                w[a] = 5;
                w[b] = 5;
            }
            if w.iter().all(|&v| v == 0) {
                w[rng.random_range(0..ctx)] = 1;
            }
            let total: u32 = w.iter().sum();
            let row: Vec<f32> = w.iter().map(|&v| v as f32 / total as f32).collect();
            argmax.push(row_argmax(&row).expect("row has positive mass"));
            dense.extend(row);
        }
        steps.push(StepRecord {
            step: s,
            token,
            token_id: None,
            heads: argmax,
            dense: Some(dense),
        });
    }
    let trace_id = format!("random-{seed}");
    let trace = AttentionTrace {
        header: TraceHeader {
            trace_id: trace_id.clone(),
            model_id: "toy-oracle".into(),
            num_layers,
            num_heads,
            layout,
            input_token_texts: Some(texts),
            answer: answer_tokens.concat(),
            question: String::new(),
            generation_segments: None,
            causal_context: causal,
            generation_offset: 0,
            interventions: vec![],
        },
        fidelity: Fidelity::Dense,
        steps,
    };
    RandomTrace {
        trace,
        evidence: EvidenceSet {
            instance_id: trace_id,
            indices: evidence,
            threshold: 0.1,
            mode: OverlapMode::Iou,
        },
        answer_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::PatchGrid;
    use crate::scoring::{ocr_score_instance, retrieval_score_instance, AnswerTokens, ScoringOptions};
    use crate::trace::validate;

    fn spec(ocr: Vec<HeadPlant>, fidelity: Fidelity) -> PlantSpec {
        let g = PatchGrid::new(56, 28, 14).unwrap();
        let layout = TokenLayout::sequential(&[g, g], 3, 1, 8);
        PlantSpec {
            trace_id: "p0".into(),
            num_layers: 4,
            num_heads: 10,
            evidence: [4, 5, 12].into_iter().collect(),
            layout,
            answer_tokens: ["1", "2", "3", "4"].map(String::from).to_vec(),
            generated: ["1", "2", "x", "3", "4", "2"].map(String::from).to_vec(),
            ocr_plants: ocr,
            retrieval_plants: vec![],
            noise: 0.0,
            fidelity,
            seed: 9,
        }
    }

    #[test]
    fn planted_half_score() {
        let head = HeadId::new(3, 8);
        let p = plant_trace(&spec(vec![HeadPlant { head, score: 0.5 }], Fidelity::Dense)).unwrap();
        validate(&p.trace).unwrap();
        assert_eq!(p.expected_ocr.score(head), 0.5);
        assert_eq!(p.expected_ocr.hits.iter().sum::<u32>(), 2);
        let k = AnswerTokens::new(p.expected_ocr.answer_tokens.clone()).unwrap();
        let fast = ocr_score_instance(&p.trace, &p.evidence, &k, &ScoringOptions::default()).unwrap();
        assert_eq!(fast, p.expected_ocr);
        let brute = brute_force_score(&p.trace, &p.evidence.indices, k.tokens(), ScoreKind::Ocr).unwrap();
        assert_eq!(brute, p.expected_ocr);
    }

    #[test]
    fn no_plants_is_all_zero() {
        let p = plant_trace(&spec(vec![], Fidelity::ArgmaxOnly)).unwrap();
        assert!(p.expected_ocr.hits.iter().all(|&h| h == 0));
        assert!(p.expected_retrieval.hits.iter().all(|&h| h == 0));
    }

    #[test]
    fn fractional_plant_is_infeasible() {
        let r = plant_trace(&spec(
            vec![HeadPlant {
                head: HeadId::new(0, 0),
                score: 0.3,
            }],
            Fidelity::Dense,
        ));
        assert!(matches!(r, Err(OracleError::InfeasiblePlant(_))));
    }

    #[test]
    fn retrieval_plant() {
        let mut s = spec(
            vec![HeadPlant {
                head: HeadId::new(1, 1),
                score: 0.25,
            }],
            Fidelity::Dense,
        );
        s.retrieval_plants = vec![HeadPlant {
            head: HeadId::new(1, 1),
            score: 0.75,
        }];
        let p = plant_trace(&s).unwrap();
        let k = AnswerTokens::new(p.expected_ocr.answer_tokens.clone()).unwrap();
        let fast = retrieval_score_instance(&p.trace, &p.answer_positions, &k, &ScoringOptions::default()).unwrap();
        assert_eq!(fast, p.expected_retrieval);
        assert_eq!(fast.hits(HeadId::new(1, 1)), 3);
        let brute = brute_force_score(&p.trace, &p.evidence.indices, k.tokens(), ScoreKind::Retrieval).unwrap();
        assert_eq!(brute, fast);

        s.retrieval_plants[0].score = 1.0;
        assert!(plant_trace(&s).is_err());
    }

    #[test]
    fn determinism() {
        let s = spec(
            vec![HeadPlant {
                head: HeadId::new(2, 2),
                score: 0.75,
            }],
            Fidelity::Dense,
        );
        assert_eq!(plant_trace(&s).unwrap().trace, plant_trace(&s).unwrap().trace);
    }

    #[test]
    fn brute_force_tie_goes_low() {
        let mut p = plant_trace(&spec(vec![], Fidelity::Dense)).unwrap();
        let len = p.trace.header.input_len();
        // Head 0 at step 0 ("1"): tie between evidence 4 and neutral 20.
        let mut row = vec![0.0f32; len];
        row[4] = 0.5;
        row[20] = 0.5;
        p.trace.steps[0].dense.as_mut().unwrap()[..len].copy_from_slice(&row);
        let k = p.expected_ocr.answer_tokens.clone();
        let brute = brute_force_score(&p.trace, &p.evidence.indices, &k, ScoreKind::Ocr).unwrap();
        assert_eq!(brute.hits[0], 1);
        assert!(matches!(
            brute_force_score(&p.trace.compact().unwrap(), &p.evidence.indices, &k, ScoreKind::Ocr),
            Err(OracleError::Trace(TraceError::RequiresDense))
        ));
    }

    #[test]
    fn random_traces_validate_and_match_fast_path() {
        let opts = ScoringOptions::default();
        for seed in 0..50 {
            let r = random_dense_trace(seed, &RandomTraceLimits::default());
            validate(&r.trace).unwrap();
            let k = AnswerTokens::new(r.answer_tokens.clone()).unwrap();
            let fast = ocr_score_instance(&r.trace, &r.evidence, &k, &opts).unwrap();
            let slow = brute_force_score(&r.trace, &r.evidence.indices, &r.answer_tokens, ScoreKind::Ocr).unwrap();
            assert_eq!(fast.hits, slow.hits);
        }
    }
}
