// SPDX-License-Identifier: MIT OR Apache-2.0

//! Population statistics over head sets and aggregated score maps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{all_heads, HeadId};
use crate::scoring::AggregateScores;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("buckets {0} and {1} overlap")]
    OverlappingBuckets(String, String),
    #[error("bucket {0} is empty or inverted")]
    InvalidBucket(String),
    #[error("aggregates disagree on shape: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
    #[error("aggregate has no instances")]
    EmptyInput,
    #[error("top-k list for {label:?} has {len} heads, expected {k}")]
    LengthMismatch { label: String, len: usize, k: usize },
    #[error("top-k list for {label:?} repeats {head}")]
    DuplicateHead { label: String, head: HeadId },
}

/// `|A ∩ B|` and `|A ∪ B|`.
pub fn jaccard_counts(a: &BTreeSet<HeadId>, b: &BTreeSet<HeadId>) -> (usize, usize) {
    let inter = a.intersection(b).count();
    (inter, a.len() + b.len() - inter)
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets scoring 0.
pub fn jaccard(a: &BTreeSet<HeadId>, b: &BTreeSet<HeadId>) -> f64 {
    match jaccard_counts(a, b) {
        (_, 0) => 0.0,
        (i, u) => i as f64 / u as f64,
    }
}

/// A real interval with explicit endpoint inclusivity; `upper = None` is +∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBucket {
    pub label: String,
    pub lower: f64,
    pub upper: Option<f64>,
    pub lower_inclusive: bool,
    pub upper_inclusive: bool,
}

impl ScoreBucket {
    pub fn new(label: &str, lower: f64, upper: Option<f64>, lower_inclusive: bool, upper_inclusive: bool) -> Self {
        Self {
            label: label.to_string(),
            lower,
            upper,
            lower_inclusive,
            upper_inclusive: upper_inclusive && upper.is_some(),
        }
    }

    fn upper_value(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = if self.lower_inclusive {
            x >= self.lower
        } else {
            x > self.lower
        };
        let below = if self.upper_inclusive {
            x <= self.upper_value()
        } else {
            x < self.upper_value()
        };
        above && below
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let (lo, hi) = (self.lower, self.upper_value());
        let ok =
            !lo.is_nan() && !hi.is_nan() && (lo < hi || (lo == hi && self.lower_inclusive && self.upper_inclusive));
        if ok {
            Ok(())
        } else {
            Err(AnalysisError::InvalidBucket(self.label.clone()))
        }
    }

    /// Whether some real number lies in both buckets.
    pub fn overlaps(&self, other: &ScoreBucket) -> bool {
        let (lo, lo_inc) = match self.lower.total_cmp(&other.lower) {
            std::cmp::Ordering::Greater => (self.lower, self.lower_inclusive),
            std::cmp::Ordering::Less => (other.lower, other.lower_inclusive),
            std::cmp::Ordering::Equal => (self.lower, self.lower_inclusive && other.lower_inclusive),
        };
        let (hi, hi_inc) = match self.upper_value().total_cmp(&other.upper_value()) {
            std::cmp::Ordering::Less => (self.upper_value(), self.upper_inclusive),
            std::cmp::Ordering::Greater => (other.upper_value(), other.upper_inclusive),
            std::cmp::Ordering::Equal => (self.upper_value(), self.upper_inclusive && other.upper_inclusive),
        };
        lo < hi || (lo == hi && lo_inc && hi_inc)
    }
}

/// `{0}, (0, 0.1), [0.1, 0.3), [0.3, 0.5), [0.5, 1.0]`: a partition of `[0, 1]`.
pub fn score_partition() -> Vec<ScoreBucket> {
    vec![
        ScoreBucket::new("0", 0.0, Some(0.0), true, true),
        ScoreBucket::new("0-0.1", 0.0, Some(0.1), false, false),
        ScoreBucket::new("0.1-0.3", 0.1, Some(0.3), true, false),
        ScoreBucket::new("0.3-0.5", 0.3, Some(0.5), true, false),
        ScoreBucket::new("0.5-1.0", 0.5, Some(1.0), true, true),
    ]
}

/// `[0.1, ∞)`, reported next to the partition.
pub fn summary_bucket() -> ScoreBucket {
    ScoreBucket::new("0.1<=", 0.1, None, true, false)
}

/// Rejects invalid or pairwise-overlapping buckets.
pub fn check_disjoint(buckets: &[ScoreBucket]) -> Result<(), AnalysisError> {
    for b in buckets {
        b.validate()?;
    }
    for (i, a) in buckets.iter().enumerate() {
        for b in &buckets[i + 1..] {
            if a.overlaps(b) {
                return Err(AnalysisError::OverlappingBuckets(a.label.clone(), b.label.clone()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketJaccard {
    pub bucket: ScoreBucket,
    pub ocr_heads: usize,
    pub retrieval_heads: usize,
    pub intersection: usize,
    pub union: usize,
    pub jaccard: f64,
    /// Neither map placed any head in this bucket.
    pub empty: bool,
}

fn bucket_members(agg: &AggregateScores, bucket: &ScoreBucket) -> BTreeSet<HeadId> {
    all_heads(agg.num_layers, agg.num_heads)
        .filter(|&h| bucket.contains(agg.mean(h)))
        .collect()
}

fn bucket_row(ocr: &AggregateScores, ret: &AggregateScores, bucket: &ScoreBucket) -> BucketJaccard {
    let a = bucket_members(ocr, bucket);
    let b = bucket_members(ret, bucket);
    let (intersection, union) = jaccard_counts(&a, &b);
    BucketJaccard {
        bucket: bucket.clone(),
        ocr_heads: a.len(),
        retrieval_heads: b.len(),
        intersection,
        union,
        jaccard: jaccard(&a, &b),
        empty: union == 0,
    }
}

fn same_shape(a: &AggregateScores, b: &AggregateScores) -> Result<(), AnalysisError> {
    if (a.num_layers, a.num_heads) != (b.num_layers, b.num_heads) {
        return Err(AnalysisError::ShapeMismatch(
            (a.num_layers, a.num_heads),
            (b.num_layers, b.num_heads),
        ));
    }
    Ok(())
}

/// Per-bucket Jaccard between the heads each map places in the bucket.
/// The buckets must be pairwise disjoint.
pub fn bucketed_jaccard(
    ocr: &AggregateScores,
    retrieval: &AggregateScores,
    buckets: &[ScoreBucket],
) -> Result<Vec<BucketJaccard>, AnalysisError> {
    same_shape(ocr, retrieval)?;
    check_disjoint(buckets)?;
    Ok(buckets.iter().map(|b| bucket_row(ocr, retrieval, b)).collect())
}

/// The partition rows followed by the summary bucket row.
pub fn bucket_report(ocr: &AggregateScores, retrieval: &AggregateScores) -> Result<Vec<BucketJaccard>, AnalysisError> {
    let mut rows = bucketed_jaccard(ocr, retrieval, &score_partition())?;
    rows.push(bucket_row(ocr, retrieval, &summary_bucket()));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total_heads: usize,
    /// Heads with mean > 0.1.
    pub active_heads: usize,
    pub active_fraction: f64,
    /// Heads with 0.01 < mean < 0.1.
    pub low_band_heads: usize,
    pub low_band_fraction: f64,
}

pub fn sparsity_report(agg: &AggregateScores) -> Result<SparsityReport, AnalysisError> {
    if agg.num_instances == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    let means = agg.means();
    let total = means.len();
    let active = means.iter().filter(|&&m| m > 0.1).count();
    let low = means.iter().filter(|&&m| m > 0.01 && m < 0.1).count();
    Ok(SparsityReport {
        total_heads: total,
        active_heads: active,
        active_fraction: active as f64 / total as f64,
        low_band_heads: low,
        low_band_fraction: low as f64 / total as f64,
    })
}

/// Number of heads per layer with mean above `threshold`.
pub fn layer_histogram(agg: &AggregateScores, threshold: f64) -> Result<Vec<u32>, AnalysisError> {
    if agg.num_instances == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    let mut counts = vec![0u32; agg.num_layers as usize];
    for h in all_heads(agg.num_layers, agg.num_heads) {
        if agg.mean(h) > threshold {
            counts[h.layer as usize] += 1;
        }
    }
    Ok(counts)
}

/// Pairwise shared top-k heads between characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coactivation {
    pub k: usize,
    pub labels: Vec<String>,
    /// Each label's top-k heads in rank order.
    pub lists: Vec<Vec<HeadId>>,
    pub counts: Vec<Vec<usize>>,
    pub shared: Vec<Vec<Vec<HeadId>>>,
}

impl Coactivation {
    pub fn count(&self, a: &str, b: &str) -> Option<usize> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.counts[i][j])
    }
}

pub fn char_coactivation(top_k: &[(String, Vec<HeadId>)], k: usize) -> Result<Coactivation, AnalysisError> {
    let mut sets = Vec::with_capacity(top_k.len());
    for (label, heads) in top_k {
        if heads.len() != k {
            return Err(AnalysisError::LengthMismatch {
                label: label.clone(),
                len: heads.len(),
                k,
            });
        }
        let mut set = BTreeSet::new();
        for &h in heads {
            if !set.insert(h) {
                return Err(AnalysisError::DuplicateHead {
                    label: label.clone(),
                    head: h,
                });
            }
        }
        sets.push(set);
    }
    let n = sets.len();
    let mut counts = vec![vec![0; n]; n];
    let mut shared = vec![vec![Vec::new(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let common: Vec<HeadId> = sets[i].intersection(&sets[j]).copied().collect();
            counts[i][j] = common.len();
            shared[i][j] = common;
        }
    }
    Ok(Coactivation {
        k,
        labels: top_k.iter().map(|(l, _)| l.clone()).collect(),
        lists: top_k.iter().map(|(_, h)| h.clone()).collect(),
        counts,
        shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{Exact, ScoreKind};

    fn set(ids: &[(u32, u32)]) -> BTreeSet<HeadId> {
        ids.iter().map(|&(l, h)| HeadId::new(l, h)).collect()
    }

    fn agg(means: &[(u128, u128)], layers: u32) -> AggregateScores {
        let heads = means.len() as u32 / layers;
        let mut a = AggregateScores::empty(ScoreKind::Ocr, layers, heads, 0.1);
        a.num_instances = 1;
        for (h, &(n, d)) in a.heads.iter_mut().zip(means) {
            h.score_sum = Exact::new(n, d);
        }
        a
    }

    #[test]
    fn jaccard_cases() {
        let a = set(&[(0, 1), (0, 2)]);
        assert_eq!(jaccard(&a, &a), 1.0);
        assert_eq!(jaccard(&a, &set(&[(1, 1)])), 0.0);
        assert_eq!(jaccard(&a, &set(&[(0, 1), (0, 3)])), 1.0 / 3.0);
        assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 0.0);
    }

    #[test]
    fn partition_is_disjoint_and_covers() {
        let p = score_partition();
        check_disjoint(&p).unwrap();
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            assert_eq!(p.iter().filter(|b| b.contains(x)).count(), 1, "{x}");
        }
        let mut with_summary = p.clone();
        with_summary.push(summary_bucket());
        assert!(matches!(
            check_disjoint(&with_summary),
            Err(AnalysisError::OverlappingBuckets(..))
        ));
    }

    #[test]
    fn bucket_edges() {
        let p = score_partition();
        assert!(p[0].contains(0.0) && !p[1].contains(0.0));
        assert!(p[2].contains(0.1) && !p[1].contains(0.1));
        assert!(p[4].contains(1.0));
        assert!(summary_bucket().contains(0.1));
    }

    #[test]
    fn planted_eight_head_table() {
        // OCR means:       0, .05, .2, .2, .4, .6, .0, .9
        // retrieval means: 0, .2,  .2, .05, .4, .0, .0, .7
        let ocr = agg(&[(0, 1), (1, 20), (1, 5), (1, 5), (2, 5), (3, 5), (0, 1), (9, 10)], 2);
        let ret = agg(&[(0, 1), (1, 5), (1, 5), (1, 20), (2, 5), (0, 1), (0, 1), (7, 10)], 2);
        let rows = bucket_report(&ocr, &ret).unwrap();
        let j: Vec<f64> = rows.iter().map(|r| r.jaccard).collect();
        // {0}: ocr {0,6} ret {0,5,6} -> 2/3
        // (0,.1): ocr {1} ret {3} -> 0
        // [.1,.3): ocr {2,3} ret {1,2} -> 1/3
        // [.3,.5): {4} {4} -> 1
        // [.5,1]: ocr {5,7} ret {7} -> 1/2
        // >=.1: ocr {2,3,4,5,7} ret {1,2,4,7} -> 3/6
        assert_eq!(j, vec![2.0 / 3.0, 0.0, 1.0 / 3.0, 1.0, 0.5, 0.5]);
        let consumed: usize = rows[..5].iter().map(|r| r.ocr_heads).sum();
        assert_eq!(consumed, 8);
    }

    #[test]
    fn empty_bucket_marker() {
        let a = agg(&[(0, 1), (0, 1)], 1);
        let rows = bucket_report(&a, &a).unwrap();
        assert!(rows[0].jaccard == 1.0 && !rows[0].empty);
        assert!(rows[3].empty && rows[3].jaccard == 0.0);
    }

    #[test]
    fn sparsity_bands() {
        let mut means = vec![(0u128, 1u128); 100];
        for m in means.iter_mut().take(5) {
            *m = (1, 2);
        }
        means[10] = (1, 100);
        means[11] = (1, 20);
        let r = sparsity_report(&agg(&means, 10)).unwrap();
        assert_eq!(r.active_fraction, 0.05);
        assert_eq!(r.low_band_heads, 1);
        assert_eq!(r.total_heads, 100);
        let zero = sparsity_report(&agg(&[(0, 1); 4], 2)).unwrap();
        assert_eq!((zero.active_fraction, zero.low_band_fraction), (0.0, 0.0));
    }

    #[test]
    fn histogram() {
        let a = agg(&[(0, 1), (0, 1), (1, 2), (1, 2), (1, 2), (0, 1)], 3);
        assert_eq!(layer_histogram(&a, 0.1).unwrap(), vec![0, 2, 1]);
        assert_eq!(layer_histogram(&a, 0.6).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn coactivation() {
        let h = |i| HeadId::new(i, 0);
        let lists = vec![
            ("1".to_string(), vec![h(0), h(1), h(2), h(3), h(4)]),
            ("i".to_string(), vec![h(0), h(1), h(2), h(8), h(9)]),
            ("z".to_string(), vec![h(10), h(11), h(12), h(13), h(14)]),
        ];
        let c = char_coactivation(&lists, 5).unwrap();
        assert_eq!(c.count("1", "i"), Some(3));
        assert_eq!(c.shared[0][1], vec![h(0), h(1), h(2)]);
        assert_eq!(c.count("1", "z"), Some(0));
        assert_eq!(c.count("z", "z"), Some(5));
        assert!(matches!(
            char_coactivation(&lists, 4),
            Err(AnalysisError::LengthMismatch { .. })
        ));
    }
}
