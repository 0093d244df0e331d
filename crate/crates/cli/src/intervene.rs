// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention plan construction and trace-level application.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ocrhead_core::interventions::{
    apply_redistribution, mask_rows, random_head_plan, InterventionKind, InterventionPlan, InterventionReport,
    SinkUpdateRule, MASK_SWEEP_COUNTS, RANDOM_MASK_SEEDS, REDISTRIBUTE_TOP_K,
};
use ocrhead_core::scoring::{top_k_heads, AggregateScores};
use ocrhead_core::trace::{read_trace, write_trace, TraceFormat};

pub fn write_plan(path: &Path, plan: &InterventionPlan) -> Result<()> {
    plan.validate()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(plan)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<InterventionPlan> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let plan: InterventionPlan =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing plan {}", path.display()))?;
    plan.validate()?;
    Ok(plan)
}

pub fn top_plan(
    agg: &AggregateScores,
    kind: InterventionKind,
    k: usize,
    beta: f64,
    rule: SinkUpdateRule,
) -> Result<InterventionPlan> {
    let heads = top_k_heads(agg, k)?;
    let source = match agg.kind {
        ocrhead_core::scoring::ScoreKind::Ocr => "ocr",
        ocrhead_core::scoring::ScoreKind::Retrieval => "retrieval",
    };
    let plan = match kind {
        InterventionKind::Mask => InterventionPlan::mask(heads),
        InterventionKind::Redistribute => InterventionPlan::redistribute(heads, beta, rule),
    };
    Ok(plan.with_label(format!("top {k} {source} heads")))
}

/// Masking sweep: top 5/10/20 of each head type, plus random sets of the
/// same sizes under the five standard seeds.
pub fn mask_sweep(dir: &Path, ocr: &AggregateScores, ret: &AggregateScores) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &n in &MASK_SWEEP_COUNTS {
        for (name, agg) in [("ocr", ocr), ("retrieval", ret)] {
            let p = dir.join(format!("mask-{name}-top{n:02}.json"));
            write_plan(
                &p,
                &top_plan(agg, InterventionKind::Mask, n, 0.0, SinkUpdateRule::ScaleDown)?,
            )?;
            written.push(p);
        }
        for &seed in &RANDOM_MASK_SEEDS {
            let p = dir.join(format!("mask-random-{n:02}-seed{seed}.json"));
            write_plan(&p, &random_head_plan(ocr.num_layers, ocr.num_heads, n, seed)?)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Sink redistribution on the top-4 heads of each type.
pub fn redistribute_preset(
    dir: &Path,
    ocr: &AggregateScores,
    ret: &AggregateScores,
    beta: f64,
    rule: SinkUpdateRule,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, agg) in [("ocr", ocr), ("retrieval", ret)] {
        let p = dir.join(format!("redistribute-{name}-top{REDISTRIBUTE_TOP_K}.json"));
        write_plan(
            &p,
            &top_plan(agg, InterventionKind::Redistribute, REDISTRIBUTE_TOP_K, beta, rule)?,
        )?;
        written.push(p);
    }
    Ok(written)
}

pub fn apply(plan_path: &Path, input: &Path, output: &Path, format: TraceFormat) -> Result<InterventionReport> {
    let plan = read_plan(plan_path)?;
    let trace = read_trace(input).with_context(|| format!("reading {}", input.display()))?;
    let (out, report) = match plan.kind {
        InterventionKind::Mask => mask_rows(&trace, &plan)?,
        InterventionKind::Redistribute => apply_redistribution(&trace, &plan)?,
    };
    write_trace(output, &out, format).with_context(|| format!("writing {}", output.display()))?;
    Ok(report)
}
