// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pipeline stages: gen, evidence, simulate, score, detect, compare.
//! Work is spread over rayon workers; outputs are always written in
//! instance-id order.

use std::collections::BTreeSet;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ocrhead_core::analysis::{
    bucket_report, char_coactivation, jaccard, jaccard_counts, layer_histogram, sparsity_report,
};
use ocrhead_core::oracle::{plant_trace, HeadPlant, PlantSpec};
use ocrhead_core::patch::{evidence_tokens, EvidenceSet, PatchGrid, TokenLayout};
use ocrhead_core::records::{
    DetectionCriteria, DetectionRecord, EvidenceRecord, InstanceRecord, JaccardRecord, LayerHistogramRecord,
    PageRecord, Record, SparsityRecord,
};
use ocrhead_core::scoring::{
    answer_positions, answer_token_set, cot_dual_score, detect_ocr_heads, detect_retrieval_heads, ocr_score_instance,
    retrieval_score_instance, top_k_instance, AggregateScores, AnswerTokens, ScoreKind, ScoreMatrix, TokenizerView,
};
use ocrhead_core::textimage::{
    generate_spec, make_character_sweep, render_instance, resize_instance, InstanceKind, RenderedInstance, ScaleFactor,
    SWEEP_DEPTH,
};
use ocrhead_core::trace::{read_trace, write_trace};
use ocrhead_core::HeadId;

use crate::config::{RunConfig, TokenizerChoice, MIN_PAGES};
use crate::error::InternalError;
use crate::workspace::{load, save, Dataset};

const SIMULATE_SALT: u64 = 0x5349_4d55_4c41_5445;

/// Independent per-item seed derived from a base seed.
pub fn child_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

fn fresh_dir(path: &std::path::Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).with_context(|| format!("clearing {}", path.display()))?;
    }
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

struct Planned {
    id: String,
    kind: InstanceKind,
    pages: u32,
    seed: u64,
    depth: f64,
}

fn instance_record(
    ds: &Dataset,
    id: &str,
    kind: InstanceKind,
    depth: f64,
    seed: u64,
    inst: &RenderedInstance,
) -> Result<InstanceRecord> {
    let dir = ds.pages_dir().join(id);
    std::fs::create_dir_all(&dir)?;
    let mut pages = Vec::with_capacity(inst.pages.len());
    for (i, page) in inst.pages.iter().enumerate() {
        let rel = format!("pages/{id}/page-{i:02}.png");
        std::fs::write(ds.dir.join(&rel), page.to_png()).with_context(|| format!("writing {rel}"))?;
        pages.push(PageRecord {
            file: rel,
            width: page.width,
            height: page.height,
        });
    }
    Ok(InstanceRecord {
        instance_id: id.to_string(),
        kind,
        question: inst.question.clone(),
        answer: inst.answer.clone(),
        needle_depth: depth,
        seed,
        pages,
        boxes: inst.annotations.clone(),
        needle: inst.needle_span,
        render: inst.config.clone(),
        scale: inst.scale,
    })
}

fn maybe_resize(cfg: &RunConfig, inst: RenderedInstance) -> Result<RenderedInstance> {
    let factor = ScaleFactor::new(cfg.gen.resize.0, cfg.gen.resize.1)?;
    if factor == ScaleFactor::ONE {
        return Ok(inst);
    }
    Ok(resize_instance(&inst, factor, Some(cfg.patch.size))?)
}

/// Renders the main instance set: passkey and NIAH alternating, spread over
/// 2..=12 pages.
pub fn gen(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    let counts = cfg.gen.per_length()?;
    let mut plans = Vec::new();
    let mut idx = 0u64;
    for (li, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let seed = child_seed(cfg.seed, idx);
            let mut depth_rng = ChaCha8Rng::seed_from_u64(seed);
            depth_rng.set_stream(1);
            plans.push(Planned {
                id: format!("inst-{idx:05}"),
                kind: if idx.is_multiple_of(2) {
                    InstanceKind::Passkey
                } else {
                    InstanceKind::Niah
                },
                pages: MIN_PAGES + li as u32,
                seed,
                depth: depth_rng.random::<f64>(),
            });
            idx += 1;
        }
    }
    std::fs::create_dir_all(&ds.dir)?;
    fresh_dir(&ds.pages_dir())?;
    let records: Vec<Record> = plans
        .par_iter()
        .map(|p| {
            let spec = generate_spec(p.kind, None, p.depth, p.pages, p.seed, &cfg.render)?;
            let inst = maybe_resize(cfg, render_instance(&spec, &cfg.render)?)?;
            Ok(Record::Instance(instance_record(
                ds, &p.id, p.kind, p.depth, p.seed, &inst,
            )?))
        })
        .collect::<Result<_>>()?;
    save(&ds.instances(), &records)?;
    Ok(records.len())
}

/// Renders the 36-character sweep (digits and lowercase letters).
pub fn gen_sweep(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    std::fs::create_dir_all(&ds.dir)?;
    fresh_dir(&ds.pages_dir())?;
    let sweep = make_character_sweep(&cfg.render, cfg.gen.sweep_pages, cfg.seed)?;
    let records: Vec<Record> = sweep
        .into_par_iter()
        .map(|inst| {
            let id = format!("char-{}", inst.answer);
            let inst = maybe_resize(cfg, inst)?;
            Ok(Record::Instance(instance_record(
                ds,
                &id,
                InstanceKind::SingleChar,
                SWEEP_DEPTH,
                cfg.seed,
                &inst,
            )?))
        })
        .collect::<Result<_>>()?;
    save(&ds.instances(), &records)?;
    Ok(records.len())
}

fn instances(ds: &Dataset) -> Result<Vec<InstanceRecord>> {
    let mut out: Vec<InstanceRecord> = load(&ds.instances())?
        .into_iter()
        .filter_map(|r| match r {
            Record::Instance(i) => Some(i),
            _ => None,
        })
        .collect();
    out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(out)
}

pub fn evidence_records(ds: &Dataset) -> Result<Vec<EvidenceRecord>> {
    let mut out: Vec<EvidenceRecord> = load(&ds.evidence())?
        .into_iter()
        .filter_map(|r| match r {
            Record::Evidence(e) => Some(e),
            _ => None,
        })
        .collect();
    out.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(out)
}

/// Maps answer boxes to evidence patch tokens under the configured layout.
pub fn evidence(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    let insts = instances(ds)?;
    let lc = &cfg.layout;
    let records: Vec<Record> = insts
        .par_iter()
        .map(|r| {
            let grids = r
                .pages
                .iter()
                .map(|p| PatchGrid::new(p.width, p.height, cfg.patch.size))
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("instance {}", r.instance_id))?;
            let layout = TokenLayout::sequential(&grids, lc.prefix_tokens, lc.separator_tokens, lc.suffix_tokens);
            let ev = evidence_tokens(
                &r.instance_id,
                &r.boxes,
                &layout,
                cfg.patch.threshold,
                cfg.patch.overlap,
            )
            .with_context(|| format!("instance {}", r.instance_id))?;
            Ok(Record::Evidence(EvidenceRecord {
                instance_id: r.instance_id.clone(),
                answer: r.answer.clone(),
                patch_size: cfg.patch.size,
                overlap_mode: ev.mode,
                threshold: ev.threshold,
                layout,
                indices: ev.indices.into_iter().collect(),
            }))
        })
        .collect::<Result<_>>()?;
    save(&ds.evidence(), &records)?;
    Ok(records.len())
}

fn tokenizer_view(choice: TokenizerChoice) -> TokenizerView {
    match choice {
        TokenizerChoice::Characters => TokenizerView::Characters,
        TokenizerChoice::Whitespace => TokenizerView::Whitespace,
    }
}

/// Answer split into generated tokens, in order.
fn generated_tokens(answer: &str, choice: TokenizerChoice) -> Vec<String> {
    match choice {
        TokenizerChoice::Characters => answer.chars().map(String::from).collect(),
        TokenizerChoice::Whitespace => answer.split_whitespace().map(String::from).collect(),
    }
}

/// Writes one toy trace per evidence record, with the configured heads
/// planted at random per-instance strengths.
pub fn simulate(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    let evs = evidence_records(ds)?;
    let sim = &cfg.simulate;
    let ocr: Vec<(HeadId, f64)> = sim
        .ocr_heads
        .iter()
        .map(|h| Ok((h.head_id()?, h.rate)))
        .collect::<Result<_>>()?;
    let ret: Vec<(HeadId, f64)> = sim
        .retrieval_heads
        .iter()
        .map(|h| Ok((h.head_id()?, h.rate)))
        .collect::<Result<_>>()?;
    fresh_dir(&ds.traces_dir())?;
    evs.par_iter()
        .enumerate()
        .map(|(idx, ev)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SIMULATE_SALT);
            rng.set_stream(idx as u64);
            let mut generated = generated_tokens(&ev.answer, cfg.scoring.tokenizer);
            let mut answer_tokens: Vec<String> = Vec::new();
            for t in &generated {
                if !answer_tokens.contains(t) {
                    answer_tokens.push(t.clone());
                }
            }
            generated.push("</s>".into());
            let k = answer_tokens.len();
            let mut ocr_plants = Vec::new();
            let mut used = std::collections::BTreeMap::new();
            for &(head, rate) in &ocr {
                let hits = if rng.random_bool(rate) {
                    rng.random_range(1..=k)
                } else {
                    0
                };
                used.insert(head, hits);
                ocr_plants.push(HeadPlant {
                    head,
                    score: hits as f64 / k as f64,
                });
            }
            let mut retrieval_plants = Vec::new();
            for &(head, rate) in &ret {
                let room = k - used.get(&head).copied().unwrap_or(0);
                let hits = if room > 0 && rng.random_bool(rate) {
                    rng.random_range(1..=room)
                } else {
                    0
                };
                retrieval_plants.push(HeadPlant {
                    head,
                    score: hits as f64 / k as f64,
                });
            }
            let spec = PlantSpec {
                trace_id: ev.instance_id.clone(),
                num_layers: sim.num_layers,
                num_heads: sim.num_heads,
                layout: ev.layout.clone(),
                evidence: ev.indices.iter().copied().collect(),
                answer_tokens,
                generated,
                ocr_plants,
                retrieval_plants,
                noise: sim.noise,
                fidelity: sim.fidelity,
                seed: rng.next_u64(),
            };
            let mut planted = plant_trace(&spec).with_context(|| format!("instance {}", ev.instance_id))?;
            planted.trace.header.answer = ev.answer.clone();
            let path = ds.trace(&ev.instance_id, cfg.output.trace_format);
            write_trace(&path, &planted.trace, cfg.output.trace_format)
                .with_context(|| format!("writing {}", path.display()))?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(evs.len())
}

fn score_one(cfg: &RunConfig, ds: &Dataset, ev: &EvidenceRecord) -> Result<(ScoreMatrix, ScoreMatrix)> {
    let path = ds.find_trace(&ev.instance_id)?;
    let trace = read_trace(&path).with_context(|| format!("reading {}", path.display()))?;
    if trace.header.layout != ev.layout {
        bail!(
            "trace {} has a token layout different from its evidence record",
            path.display()
        );
    }
    let opts = cfg.scoring.options();
    let k: AnswerTokens = answer_token_set(&ev.answer, &tokenizer_view(cfg.scoring.tokenizer))?;
    let evidence = EvidenceSet {
        instance_id: ev.instance_id.clone(),
        indices: ev.indices.iter().copied().collect(),
        threshold: ev.threshold,
        mode: ev.overlap_mode,
    };
    let (mut ocr, mut ret) = if trace.header.generation_segments.is_some() && trace.header.causal_context {
        cot_dual_score(&trace, &evidence, &k, &opts)?
    } else {
        let positions = answer_positions(&trace, &k, opts.token_match);
        (
            ocr_score_instance(&trace, &evidence, &k, &opts)?,
            retrieval_score_instance(&trace, &positions, &k, &opts)?,
        )
    };
    ocr.instance_id = ev.instance_id.clone();
    ret.instance_id = ev.instance_id.clone();
    Ok((ocr, ret))
}

/// Scores every traced instance and writes per-instance and aggregate records.
pub fn score(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    let evs = evidence_records(ds)?;
    if evs.is_empty() {
        bail!("no evidence records in {}", ds.evidence().display());
    }
    let pairs: Vec<(ScoreMatrix, ScoreMatrix)> =
        evs.par_iter().map(|ev| score_one(cfg, ds, ev)).collect::<Result<_>>()?;
    let (l, h) = (pairs[0].0.num_layers, pairs[0].0.num_heads);
    let thr = cfg.scoring.hit_threshold;
    let mut ocr_agg = AggregateScores::empty(ScoreKind::Ocr, l, h, thr);
    let mut ret_agg = AggregateScores::empty(ScoreKind::Retrieval, l, h, thr);
    let mut records = Vec::with_capacity(pairs.len() * 2);
    for (ocr, ret) in pairs {
        ocr_agg.push(&ocr)?;
        ret_agg.push(&ret)?;
        records.push(Record::Score(ocr.into()));
        records.push(Record::Score(ret.into()));
    }
    save(&ds.scores(), &records)?;
    save(
        &ds.aggregates(),
        &[Record::Aggregate(ocr_agg.into()), Record::Aggregate(ret_agg.into())],
    )?;
    Ok(evs.len())
}

pub fn load_aggregates(ds: &Dataset) -> Result<(AggregateScores, AggregateScores)> {
    let mut ocr = None;
    let mut ret = None;
    for r in load(&ds.aggregates())? {
        if let Record::Aggregate(a) = r {
            match a.aggregate.kind {
                ScoreKind::Ocr => ocr = Some(a.aggregate),
                ScoreKind::Retrieval => ret = Some(a.aggregate),
            }
        }
    }
    Ok((
        ocr.ok_or_else(|| anyhow!("no OCR aggregate in {}", ds.aggregates().display()))?,
        ret.ok_or_else(|| anyhow!("no retrieval aggregate in {}", ds.aggregates().display()))?,
    ))
}

/// Classifies heads and records the criteria with each head set.
pub fn detect(cfg: &RunConfig, ds: &Dataset) -> Result<(BTreeSet<HeadId>, BTreeSet<HeadId>)> {
    let (ocr, ret) = load_aggregates(ds)?;
    let criteria = cfg.scoring.ocr_criteria();
    let ocr_heads = detect_ocr_heads(&ocr, &criteria)?;
    let ret_heads = detect_retrieval_heads(&ret, cfg.scoring.retrieval_mean_threshold)?;
    save(
        &ds.detections(),
        &[
            Record::Detection(DetectionRecord::new(&ocr, DetectionCriteria::Ocr(criteria), &ocr_heads)),
            Record::Detection(DetectionRecord::new(
                &ret,
                DetectionCriteria::Retrieval {
                    mean_threshold: cfg.scoring.retrieval_mean_threshold,
                },
                &ret_heads,
            )),
        ],
    )?;
    Ok((ocr_heads, ret_heads))
}

pub fn load_detections(ds: &Dataset) -> Result<(BTreeSet<HeadId>, BTreeSet<HeadId>)> {
    let mut ocr = None;
    let mut ret = None;
    for r in load(&ds.detections())? {
        if let Record::Detection(d) = r {
            match d.kind {
                ScoreKind::Ocr => ocr = Some(d.head_set()),
                ScoreKind::Retrieval => ret = Some(d.head_set()),
            }
        }
    }
    Ok((
        ocr.ok_or_else(|| anyhow!("no OCR detection in {}", ds.detections().display()))?,
        ret.ok_or_else(|| anyhow!("no retrieval detection in {}", ds.detections().display()))?,
    ))
}

/// Per-character top-k OCR heads from a dataset of single-character instances.
fn coactivation_record(cfg: &RunConfig, ds: &Dataset) -> Result<Record> {
    let k = cfg.scoring.coactivation_k;
    let mut lists = Vec::new();
    for r in load(&ds.scores())? {
        if let Record::Score(s) = r {
            if s.matrix.kind == ScoreKind::Ocr {
                let label = s.matrix.answer_tokens.concat();
                lists.push((label, top_k_instance(&s.matrix, k)?));
            }
        }
    }
    lists.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Record::Coactivation(char_coactivation(&lists, k)?))
}

/// Jaccard, bucket table, sparsity and layer histograms; co-activation when
/// a single-character dataset is configured.
pub fn compare(cfg: &RunConfig, ds: &Dataset) -> Result<usize> {
    let (ocr, ret) = load_aggregates(ds)?;
    let (ocr_heads, ret_heads) = load_detections(ds)?;
    let (intersection, union) = jaccard_counts(&ocr_heads, &ret_heads);
    let mut records = vec![Record::Jaccard(JaccardRecord {
        left: "ocr_heads".into(),
        right: "retrieval_heads".into(),
        left_size: ocr_heads.len(),
        right_size: ret_heads.len(),
        intersection,
        union,
        jaccard: jaccard(&ocr_heads, &ret_heads),
    })];
    records.extend(bucket_report(&ocr, &ret)?.into_iter().map(Record::BucketJaccard));
    for agg in [&ocr, &ret] {
        records.push(Record::Sparsity(SparsityRecord {
            kind: agg.kind,
            report: sparsity_report(agg)?,
        }));
    }
    for (agg, thr) in [
        (&ocr, cfg.scoring.ocr_mean_threshold),
        (&ret, cfg.scoring.retrieval_mean_threshold),
    ] {
        records.push(Record::LayerHistogram(LayerHistogramRecord {
            kind: agg.kind,
            threshold: thr,
            counts: layer_histogram(agg, thr)?,
        }));
    }
    if let Some(name) = &cfg.compare.coactivation_dataset {
        let sweep = Dataset::new(&cfg.workspace, name);
        records.push(coactivation_record(cfg, &sweep).with_context(|| format!("co-activation from {name}"))?);
    }
    let total_hist: u32 = records
        .iter()
        .filter_map(|r| match r {
            Record::LayerHistogram(h) if h.kind == ScoreKind::Ocr => Some(h.counts.iter().sum::<u32>()),
            _ => None,
        })
        .sum();
    let above = ocr
        .means()
        .iter()
        .filter(|&&m| m > cfg.scoring.ocr_mean_threshold)
        .count() as u32;
    if total_hist != above {
        return Err(InternalError(format!(
            "layer histogram totals {total_hist}, thresholded set has {above}"
        ))
        .into());
    }
    save(&ds.compare(), &records)?;
    Ok(records.len())
}
