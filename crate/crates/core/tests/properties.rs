// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use proptest::prelude::*;

use ocrhead_core::analysis::{check_disjoint, jaccard, jaccard_counts, layer_histogram, score_partition};
use ocrhead_core::heads::all_heads;
use ocrhead_core::interventions::{mask_rows, random_head_plan, redistribute_row, InterventionPlan, SinkUpdateRule};
use ocrhead_core::oracle::{random_dense_trace, RandomTraceLimits};
use ocrhead_core::patch::{token_count, PatchGrid, Rect};
use ocrhead_core::scoring::{
    aggregate, ocr_score_instance, AggregateScores, AnswerTokens, ScoreKind, ScoreMatrix, ScoringOptions,
};
use ocrhead_core::trace::{AttentionTrace, TraceFormat};
use ocrhead_core::HeadId;

fn head_set() -> impl Strategy<Value = BTreeSet<HeadId>> {
    prop::collection::btree_set((0u32..6, 0u32..6).prop_map(|(l, h)| HeadId::new(l, h)), 0..20)
}

fn argmax_excluding(row: &[f64], skip: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if i != skip && best.is_none_or(|b| v > row[b]) {
            best = Some(i);
        }
    }
    best
}

fn random_matrix(kind: ScoreKind, layers: u32, heads: u32, k: usize, hits: Vec<u32>, id: usize) -> ScoreMatrix {
    ScoreMatrix {
        instance_id: format!("m{id}"),
        kind,
        num_layers: layers,
        num_heads: heads,
        answer_tokens: (0..k).map(|i| format!("t{i}")).collect(),
        hits: hits.into_iter().map(|h| h.min(k as u32)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn token_count_is_product_of_grid_sides(cols in 1u32..80, rows in 1u32..80, n in 1u32..40) {
        let (w, h) = (cols * n, rows * n);
        prop_assert_eq!(token_count(w, h, n).unwrap(), (cols * rows) as usize);
        if n > 1 {
            prop_assert!(token_count(w + 1, h, n).is_err());
        }
    }

    #[test]
    fn patches_tile_the_image(cols in 1u32..6, rows in 1u32..6, n in 1u32..6) {
        let g = PatchGrid::new(cols * n, rows * n, n).unwrap();
        let mut covered = vec![0u8; (cols * n * rows * n) as usize];
        for i in 0..g.len() {
            let r = g.patch_rect(i).unwrap();
            prop_assert_eq!(r.area(), (n * n) as u64);
            for y in r.y_min..r.y_max {
                for x in r.x_min..r.x_max {
                    covered[(y * cols * n + x) as usize] += 1;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        prop_assert!(g.patch_rect(g.len()).is_err());
    }

    #[test]
    fn intersection_is_symmetric(a in (0u32..50, 0u32..50, 1u32..30, 1u32..30), b in (0u32..50, 0u32..50, 1u32..30, 1u32..30)) {
        let ra = Rect::new(a.0, a.1, a.0 + a.2, a.1 + a.3);
        let rb = Rect::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        prop_assert_eq!(ra.intersection_area(&rb), rb.intersection_area(&ra));
        prop_assert!(ra.intersection_area(&rb) <= ra.area().min(rb.area()));
    }

    #[test]
    fn jaccard_properties(a in head_set(), b in head_set()) {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
        let (i, u) = jaccard_counts(&a, &b);
        prop_assert_eq!(i, a.intersection(&b).count());
        prop_assert_eq!(u, a.union(&b).count());
        prop_assert_eq!(jaccard(&a, &a), if a.is_empty() { 0.0 } else { 1.0 });
    }

    #[test]
    fn score_buckets_partition_unit_interval(x in 0.0f64..=1.0) {
        let hits = score_partition().iter().filter(|b| b.contains(x)).count();
        prop_assert_eq!(hits, 1);
    }

    #[test]
    fn scale_down_conserves_row_sum(row in prop::collection::vec(0.0f64..1.0, 2..40), beta in 0.0f64..=1.0, sink_at in 0usize..40) {
        let sink = sink_at % row.len();
        let r = redistribute_row(&row, beta, sink, SinkUpdateRule::ScaleDown);
        let before: f64 = row.iter().sum();
        let after: f64 = r.row.iter().sum();
        prop_assert!((after - before).abs() <= 1e-6);
        if !r.degenerate {
            prop_assert_eq!(argmax_excluding(&row, sink), argmax_excluding(&r.row, sink));
        }
    }

    #[test]
    fn leave_unchanged_adds_beta_sink(row in prop::collection::vec(0.0f64..1.0, 2..40), beta in 0.0f64..=1.0) {
        let r = redistribute_row(&row, beta, 0, SinkUpdateRule::LeaveUnchanged);
        let delta: f64 = r.row.iter().sum::<f64>() - row.iter().sum::<f64>();
        if r.degenerate {
            prop_assert_eq!(&r.row, &row);
        } else {
            prop_assert!((delta - beta * row[0]).abs() <= 1e-6);
            prop_assert_eq!(r.row[0], row[0]);
        }
    }

    #[test]
    fn zero_beta_is_identity(row in prop::collection::vec(0.0f64..1.0, 1..30)) {
        for rule in [SinkUpdateRule::ScaleDown, SinkUpdateRule::LeaveUnchanged] {
            prop_assert_eq!(redistribute_row(&row, 0.0, 0, rule).row, row.clone());
        }
    }

    #[test]
    fn aggregation_merges_associatively(
        layers in 1u32..4,
        heads in 1u32..4,
        k in 1usize..6,
        split in 0usize..12,
        seeds in prop::collection::vec(prop::collection::vec(0u32..6, 16), 1..12),
    ) {
        let n = (layers * heads) as usize;
        let ms: Vec<ScoreMatrix> = seeds
            .into_iter()
            .enumerate()
            .map(|(i, h)| random_matrix(ScoreKind::Ocr, layers, heads, k, h[..n].to_vec(), i))
            .collect();
        let split = split.min(ms.len());
        let whole = aggregate(&ms, 0.1).unwrap();
        let mut left = AggregateScores::empty(ScoreKind::Ocr, layers, heads, 0.1);
        for m in &ms[..split] {
            left.push(m).unwrap();
        }
        let right = aggregate(&ms[split..], 0.1).unwrap_or_else(|_| AggregateScores::empty(ScoreKind::Ocr, layers, heads, 0.1));
        left.merge(&right).unwrap();
        prop_assert_eq!(&left, &whole);
        for h in all_heads(layers, heads) {
            let direct: f64 = ms.iter().map(|m| m.score(h)).sum::<f64>() / ms.len() as f64;
            prop_assert!((whole.mean(h) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_histogram_totals_match_threshold(
        layers in 1u32..5,
        heads in 1u32..5,
        hits in prop::collection::vec(prop::collection::vec(0u32..5, 16), 1..8),
        thr in 0.0f64..1.0,
    ) {
        let n = (layers * heads) as usize;
        let ms: Vec<ScoreMatrix> = hits
            .into_iter()
            .enumerate()
            .map(|(i, h)| random_matrix(ScoreKind::Retrieval, layers, heads, 4, h[..n].to_vec(), i))
            .collect();
        let agg = aggregate(&ms, 0.1).unwrap();
        let hist = layer_histogram(&agg, thr).unwrap();
        prop_assert_eq!(hist.len(), layers as usize);
        let above = agg.means().iter().filter(|&&m| m > thr).count() as u32;
        prop_assert_eq!(hist.iter().sum::<u32>(), above);
    }

    #[test]
    fn trace_containers_round_trip(seed in any::<u64>()) {
        let r = random_dense_trace(seed, &RandomTraceLimits::default());
        for format in [TraceFormat::Binary, TraceFormat::Jsonl] {
            let bytes = r.trace.encode(format);
            let back = AttentionTrace::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &r.trace);
            prop_assert_eq!(back.encode(format), bytes);
        }
        let compact = r.trace.compact().unwrap();
        prop_assert_eq!(AttentionTrace::decode(&compact.encode(TraceFormat::Binary)).unwrap(), compact);
    }

    #[test]
    fn truncated_binary_is_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = random_dense_trace(seed, &RandomTraceLimits::default()).trace.encode(TraceFormat::Binary);
        let at = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(AttentionTrace::decode(&bytes[..at]).is_err());
    }

    #[test]
    fn masking_contract(seed in any::<u64>(), plan_seed in 1u64..100, frac in 0.0f64..1.0) {
        let r = random_dense_trace(seed, &RandomTraceLimits::default());
        let h = &r.trace.header;
        let total = h.head_count();
        let count = 1 + ((total - 1) as f64 * frac) as usize;
        let plan = random_head_plan(h.num_layers, h.num_heads, count, plan_seed).unwrap();
        let (masked, report) = mask_rows(&r.trace, &plan).unwrap();
        prop_assert_eq!(report.rows_modified, count * r.trace.num_steps());
        let planned: BTreeSet<HeadId> = plan.heads.iter().copied().collect();
        for head in all_heads(h.num_layers, h.num_heads) {
            for s in 0..r.trace.num_steps() {
                let before = r.trace.row(s, head).unwrap();
                let after = masked.row(s, head).unwrap();
                if planned.contains(&head) {
                    prop_assert!(after.iter().all(|&v| v == 0.0));
                    prop_assert_eq!(masked.steps[s].argmax(head, h.num_heads).index, None);
                } else {
                    let same = before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
            }
        }
        let (twice, _) = mask_rows(&masked, &plan).unwrap();
        prop_assert_eq!(&twice, &masked);

        let k = AnswerTokens::new(r.answer_tokens.clone()).unwrap();
        let opts = ScoringOptions::default();
        let orig = ocr_score_instance(&r.trace, &r.evidence, &k, &opts).unwrap();
        let post = ocr_score_instance(&masked, &r.evidence, &k, &opts).unwrap();
        for head in all_heads(h.num_layers, h.num_heads) {
            let want = if planned.contains(&head) { 0 } else { orig.hits(head) };
            prop_assert_eq!(post.hits(head), want);
        }
    }
}

#[test]
fn score_buckets_are_disjoint_at_edges() {
    let p = score_partition();
    check_disjoint(&p).unwrap();
    for x in [
        0.0,
        f64::MIN_POSITIVE,
        0.1,
        0.3,
        0.5,
        1.0,
        0.09999999999999999,
        0.49999999999999994,
    ] {
        assert_eq!(p.iter().filter(|b| b.contains(x)).count(), 1, "{x}");
    }
    assert_eq!(p.iter().filter(|b| b.contains(1.0 + 1e-12)).count(), 0);
}

#[test]
fn redistribution_hand_case() {
    let r = redistribute_row(&[0.5, 0.3, 0.2], 0.4, 0, SinkUpdateRule::ScaleDown);
    for (got, want) in r.row.iter().zip([0.3, 0.42, 0.28]) {
        assert!((got - want).abs() < 1e-12, "{:?}", r.row);
    }
}

#[test]
fn masking_every_head_zeroes_all_scores() {
    let r = random_dense_trace(7, &RandomTraceLimits::default());
    let h = &r.trace.header;
    let plan = InterventionPlan::mask(all_heads(h.num_layers, h.num_heads).collect());
    let (masked, _) = mask_rows(&r.trace, &plan).unwrap();
    let k = AnswerTokens::new(r.answer_tokens.clone()).unwrap();
    let m = ocr_score_instance(&masked, &r.evidence, &k, &ScoringOptions::default()).unwrap();
    assert!(m.hits.iter().all(|&x| x == 0));
}
