// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON records for every non-trace artifact.
//!
//! Each line is one object tagged by `"record"`. Files are read back with
//! [`read_records`], which also runs the per-record semantic checks.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{BucketJaccard, Coactivation, SparsityReport};
use crate::heads::HeadId;
use crate::patch::{OverlapMode, TokenLayout};
use crate::scoring::{exact_str, AggregateScores, Exact, OcrCriteria, ScoreKind, ScoreMatrix};
use crate::textimage::{CharBox, InstanceKind, NeedleSpan, RenderConfig, ScaleFactor};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("line {line}: unsupported record schema version {found}")]
    VersionMismatch { line: usize, found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    /// Path relative to the annotation file's directory.
    pub file: String,
    pub width: u32,
    pub height: u32,
}

/// One generated instance: its pages and answer boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub kind: InstanceKind,
    pub question: String,
    pub answer: String,
    pub needle_depth: f64,
    pub seed: u64,
    pub pages: Vec<PageRecord>,
    pub boxes: Vec<CharBox>,
    pub needle: NeedleSpan,
    pub render: RenderConfig,
    pub scale: ScaleFactor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub instance_id: String,
    pub answer: String,
    pub patch_size: u32,
    pub overlap_mode: OverlapMode,
    pub threshold: f64,
    pub layout: TokenLayout,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub matrix: ScoreMatrix,
    /// `hits / |k|` per head, layer-major.
    pub scores: Vec<f64>,
}

impl From<ScoreMatrix> for ScoreRecord {
    fn from(matrix: ScoreMatrix) -> Self {
        Self {
            scores: matrix.scores(),
            matrix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub aggregate: AggregateScores,
    pub means: Vec<f64>,
    pub activation_frequencies: Vec<f64>,
}

impl From<AggregateScores> for AggregateRecord {
    fn from(aggregate: AggregateScores) -> Self {
        let heads: Vec<HeadId> = aggregate.heads.iter().map(|h| h.head).collect();
        Self {
            means: heads.iter().map(|&h| aggregate.mean(h)).collect(),
            activation_frequencies: heads.iter().map(|&h| aggregate.activation_frequency(h)).collect(),
            aggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DetectionCriteria {
    Ocr(OcrCriteria),
    Retrieval { mean_threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedHead {
    pub head: HeadId,
    pub mean: f64,
    #[serde(with = "exact_str")]
    pub mean_exact: Exact,
    pub hit_count: u64,
    pub activation_frequency: f64,
}

/// A detected head set together with the criteria and population that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub kind: ScoreKind,
    pub criteria: DetectionCriteria,
    pub num_instances: u64,
    pub num_layers: u32,
    pub num_heads: u32,
    pub heads: Vec<DetectedHead>,
}

impl DetectionRecord {
    pub fn new(agg: &AggregateScores, criteria: DetectionCriteria, heads: &BTreeSet<HeadId>) -> Self {
        Self {
            kind: agg.kind,
            criteria,
            num_instances: agg.num_instances,
            num_layers: agg.num_layers,
            num_heads: agg.num_heads,
            heads: heads
                .iter()
                .map(|&h| DetectedHead {
                    head: h,
                    mean: agg.mean(h),
                    mean_exact: agg.mean_exact(h),
                    hit_count: agg.get(h).hit_count,
                    activation_frequency: agg.activation_frequency(h),
                })
                .collect(),
        }
    }

    pub fn head_set(&self) -> BTreeSet<HeadId> {
        self.heads.iter().map(|d| d.head).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogramRecord {
    pub kind: ScoreKind,
    pub threshold: f64,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRecord {
    pub kind: ScoreKind,
    #[serde(flatten)]
    pub report: SparsityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardRecord {
    pub left: String,
    pub right: String,
    pub left_size: usize,
    pub right_size: usize,
    pub intersection: usize,
    pub union: usize,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Instance(InstanceRecord),
    Evidence(EvidenceRecord),
    Score(ScoreRecord),
    Aggregate(AggregateRecord),
    Detection(DetectionRecord),
    BucketJaccard(BucketJaccard),
    Jaccard(JaccardRecord),
    Sparsity(SparsityRecord),
    LayerHistogram(LayerHistogramRecord),
    Coactivation(Coactivation),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    #[serde(flatten)]
    record: Record,
}

impl Record {
    /// Semantic checks that serde cannot express.
    pub fn check(&self) -> Result<(), String> {
        match self {
            Record::Instance(r) => {
                if r.pages.is_empty() {
                    return Err("instance has no pages".into());
                }
                if r.boxes.len() != r.answer.chars().count() {
                    return Err(format!(
                        "{} boxes for a {}-character answer",
                        r.boxes.len(),
                        r.answer.chars().count()
                    ));
                }
                for b in &r.boxes {
                    let page = r.pages.get(b.page_index).ok_or("box on a missing page")?;
                    if b.x_min >= b.x_max || b.y_min >= b.y_max || b.x_max > page.width || b.y_max > page.height {
                        return Err(format!("box {b:?} is empty or outside its page"));
                    }
                }
                Ok(())
            }
            Record::Evidence(r) => {
                if r.indices.is_empty() {
                    return Err("evidence set is empty".into());
                }
                if !(0.0..=1.0).contains(&r.threshold) {
                    return Err(format!("threshold {} outside [0, 1]", r.threshold));
                }
                r.layout.validate().map_err(|e| e.to_string())?;
                if r.indices.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("indices are not strictly increasing".into());
                }
                if let Some(bad) = r.indices.iter().find(|&&g| !r.layout.is_image_token(g)) {
                    return Err(format!("index {bad} is not an image token"));
                }
                Ok(())
            }
            Record::Score(r) => {
                let m = &r.matrix;
                let heads = m.num_layers as usize * m.num_heads as usize;
                if m.answer_tokens.is_empty() {
                    return Err("empty answer token set".into());
                }
                if m.hits.len() != heads || r.scores.len() != heads {
                    return Err(format!("expected {heads} heads"));
                }
                if m.hits.iter().any(|&h| h > m.denom()) {
                    return Err("hit count exceeds |k|".into());
                }
                if m.scores() != r.scores {
                    return Err("scores disagree with hits / |k|".into());
                }
                Ok(())
            }
            Record::Aggregate(r) => {
                let a = &r.aggregate;
                let heads = a.num_layers as usize * a.num_heads as usize;
                if a.heads.len() != heads || r.means.len() != heads {
                    return Err(format!("expected {heads} heads"));
                }
                for (i, h) in a.heads.iter().enumerate() {
                    if h.head != HeadId::from_flat(i, a.num_heads) {
                        return Err(format!("head {i} out of order"));
                    }
                    if h.hit_count > a.num_instances {
                        return Err(format!("{}: more hits than instances", h.head));
                    }
                    if a.mean_exact(h.head) > h.max_score {
                        return Err(format!("{}: mean exceeds max", h.head));
                    }
                }
                Ok(())
            }
            Record::Detection(r) => {
                let heads: Vec<HeadId> = r.heads.iter().map(|d| d.head).collect();
                if heads.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("heads are not sorted and unique".into());
                }
                if let Some(h) = heads.iter().find(|h| !h.within(r.num_layers, r.num_heads)) {
                    return Err(format!("{h} outside model"));
                }
                Ok(())
            }
            Record::BucketJaccard(r) => unit_range(r.jaccard),
            Record::Jaccard(r) => unit_range(r.jaccard),
            Record::Sparsity(r) => unit_range(r.report.active_fraction).and(unit_range(r.report.low_band_fraction)),
            Record::LayerHistogram(_) => Ok(()),
            Record::Coactivation(c) => {
                let n = c.labels.len();
                if c.counts.len() != n || c.counts.iter().any(|row| row.len() != n) {
                    return Err("matrix is not square".into());
                }
                for i in 0..n {
                    if c.counts[i][i] != c.k {
                        return Err("diagonal differs from k".into());
                    }
                    for j in 0..n {
                        if c.counts[i][j] != c.counts[j][i] {
                            return Err("matrix is not symmetric".into());
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

fn unit_range(x: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(format!("{x} outside [0, 1]"))
    }
}

pub fn encode_record(record: &Record) -> String {
    serde_json::to_string(&Envelope {
        schema_version: RECORD_SCHEMA_VERSION,
        record: record.clone(),
    })
    .expect("records serialize")
}

pub fn decode_record(line: &str, line_no: usize) -> Result<Record, RecordError> {
    let raw: serde_json::Value = serde_json::from_str(line).map_err(|e| RecordError::Invalid {
        line: line_no,
        reason: e.to_string(),
    })?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == RECORD_SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(RecordError::VersionMismatch {
                line: line_no,
                found: v as u32,
            })
        }
        None => {
            return Err(RecordError::Invalid {
                line: line_no,
                reason: "missing schema_version".into(),
            })
        }
    }
    let env: Envelope = serde_json::from_value(raw).map_err(|e| RecordError::Invalid {
        line: line_no,
        reason: e.to_string(),
    })?;
    env.record
        .check()
        .map_err(|reason| RecordError::Invalid { line: line_no, reason })?;
    Ok(env.record)
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a Record>) -> Result<(), RecordError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", encode_record(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, RecordError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_record(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::aggregate;

    fn matrix() -> ScoreMatrix {
        ScoreMatrix {
            instance_id: "i0".into(),
            kind: ScoreKind::Ocr,
            num_layers: 1,
            num_heads: 3,
            answer_tokens: vec!["1".into(), "2".into(), "3".into()],
            hits: vec![0, 1, 3],
        }
    }

    #[test]
    fn round_trips() {
        let agg = aggregate(&[matrix(), matrix()], 0.1).unwrap();
        let det = DetectionRecord::new(
            &agg,
            DetectionCriteria::Ocr(OcrCriteria::default()),
            &[HeadId::new(0, 1), HeadId::new(0, 2)].into_iter().collect(),
        );
        let records = [
            Record::Score(matrix().into()),
            Record::Aggregate(agg.into()),
            Record::Detection(det),
        ];
        for (i, r) in records.iter().enumerate() {
            let line = encode_record(r);
            assert!(line.contains("\"schema_version\":1"));
            assert_eq!(&decode_record(&line, i + 1).unwrap(), r);
        }
    }

    #[test]
    fn exact_means_are_text() {
        let agg = aggregate(&[matrix()], 0.1).unwrap();
        let line = encode_record(&Record::Aggregate(agg.into()));
        assert!(line.contains("\"score_sum\":\"1/3\""), "{line}");
    }

    #[test]
    fn bad_records() {
        let mut m = matrix();
        m.hits[0] = 4;
        let line = encode_record(&Record::Score(m.into()));
        assert!(matches!(
            decode_record(&line, 3),
            Err(RecordError::Invalid { line: 3, .. })
        ));
        let line =
            encode_record(&Record::Score(matrix().into())).replace("\"schema_version\":1", "\"schema_version\":7");
        assert!(matches!(
            decode_record(&line, 1),
            Err(RecordError::VersionMismatch { found: 7, .. })
        ));
        assert!(decode_record("{\"record\":\"nope\",\"schema_version\":1}", 1).is_err());
    }
}
