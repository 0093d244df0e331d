// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ocrhead`: generate text images, map evidence, score traces, detect and
//! compare heads, build interventions and emit plot data.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ocrhead_core::interventions::{random_head_plan, InterventionKind, SinkUpdateRule};
use ocrhead_core::metrics::{mean_token_f1, token_f1};
use ocrhead_core::patch::OverlapMode;
use ocrhead_core::trace::{Fidelity, TraceFormat};

use ocrhead_cli::config::RunConfig;
use ocrhead_cli::error::{classify, EXIT_OK, EXIT_VALIDATION};
use ocrhead_cli::intervene;
use ocrhead_cli::plot::plot;
use ocrhead_cli::stages;
use ocrhead_cli::validate::{collect, validate_file};
use ocrhead_cli::workspace::Dataset;

/// Parses a snake_case enum through its serde representation.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "ocrhead", version, about = "OCR and retrieval head analysis toolkit")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirror config keys and take precedence over the config file.
#[derive(Args, Debug)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `workspace`
    #[arg(long, global = true, env = "OCRHEAD_WORKSPACE")]
    workspace: Option<PathBuf>,
    /// `dataset`
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `workers` (0 = one per core)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `gen.total_instances`
    #[arg(long, global = true)]
    total_instances: Option<u32>,
    /// `patch.size`
    #[arg(long, global = true)]
    patch_size: Option<u32>,
    /// `patch.overlap`: iou | intersection_over_patch
    #[arg(long, global = true, value_parser = serde_enum::<OverlapMode>)]
    overlap: Option<OverlapMode>,
    /// `patch.threshold`
    #[arg(long, global = true)]
    overlap_threshold: Option<f64>,
    /// `scoring.hit_threshold`
    #[arg(long, global = true)]
    hit_threshold: Option<f64>,
    /// `simulate.fidelity`: argmax_only | dense
    #[arg(long, global = true, value_parser = serde_enum::<Fidelity>)]
    fidelity: Option<Fidelity>,
    /// `output.trace_format`: binary | jsonl
    #[arg(long, global = true, value_parser = serde_enum::<TraceFormat>)]
    trace_format: Option<TraceFormat>,
    /// `compare.coactivation_dataset`
    #[arg(long, global = true)]
    coactivation_dataset: Option<String>,
    /// `intervene.beta`
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// `intervene.sink_update_rule`: scale_down | leave_unchanged
    #[arg(long, global = true, value_parser = serde_enum::<SinkUpdateRule>)]
    sink_update_rule: Option<SinkUpdateRule>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = &self.$flag {
                    cfg.$($field).+ = v.clone();
                }
            };
        }
        set!(workspace => workspace);
        set!(dataset => dataset);
        set!(seed => seed);
        set!(workers => workers);
        set!(total_instances => gen.total_instances);
        set!(patch_size => patch.size);
        set!(overlap => patch.overlap);
        set!(overlap_threshold => patch.threshold);
        set!(hit_threshold => scoring.hit_threshold);
        set!(fidelity => simulate.fidelity);
        set!(trace_format => output.trace_format);
        set!(beta => intervene.beta);
        set!(sink_update_rule => intervene.sink_update_rule);
        if let Some(d) = &self.coactivation_dataset {
            cfg.compare.coactivation_dataset = Some(d.clone());
        }
        if self.total_instances.is_some() {
            cfg.gen.counts = None;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render instances and answer annotations.
    Gen {
        /// Render the single-character sweep instead of the main set.
        #[arg(long)]
        sweep: bool,
    },
    /// Map answer boxes to evidence patch tokens.
    Evidence,
    /// Write toy traces with planted heads for every evidence record.
    Simulate,
    /// Score every trace and aggregate per head.
    Score,
    /// Classify heads from the aggregates.
    Detect,
    /// Jaccard, bucket table, sparsity, layer and co-activation reports.
    Compare,
    /// Build intervention plans or apply them to traces.
    Intervene {
        #[command(subcommand)]
        action: InterveneAction,
    },
    /// Emit CSV matrices and SVG figures from analysis outputs.
    Plot,
    /// Schema-check artifact files or directories.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Token F1 between a prediction and a gold answer, or over a JSONL file
    /// of `{"prediction": .., "gold": ..}` lines.
    F1 {
        prediction: Option<String>,
        gold: Option<String>,
        #[arg(long, conflicts_with_all = ["prediction", "gold"])]
        file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlanSource {
    Ocr,
    Retrieval,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Top 5/10/20 OCR and retrieval heads plus random sets under seeds 1..=5.
    MaskSweep,
    /// Sink redistribution on the top-4 heads of each type.
    Redistribute,
}

#[derive(Subcommand, Debug)]
enum InterveneAction {
    /// Write a single plan file.
    Plan {
        #[arg(long, value_enum)]
        source: PlanSource,
        #[arg(long, value_parser = serde_enum::<InterventionKind>, default_value = "mask")]
        kind: InterventionKind,
        #[arg(long)]
        top: usize,
        /// Seed for `--source random`.
        #[arg(long, default_value_t = 1)]
        plan_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a canned set of plans into `<dataset>/plans`.
    Preset {
        #[arg(value_enum)]
        preset: Preset,
    },
    /// Apply a plan to one trace, or to every trace of the dataset.
    Apply {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Summary<'a> {
    stage: &'a str,
    dataset: String,
    count: usize,
}

fn summary(stage: &str, ds: &Dataset, count: usize) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string(&Summary {
            stage,
            dataset: ds.dir.display().to_string(),
            count
        })?
    );
    Ok(())
}

fn f1_file(path: &std::path::Path) -> Result<f64> {
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Pair {
        prediction: String,
        gold: String,
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs: Vec<Pair> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect::<Result<_>>()?;
    mean_token_f1(pairs.iter().map(|p| (p.prediction.as_str(), p.gold.as_str())))
        .with_context(|| format!("{}: no pairs", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.overrides.config.as_deref())?;
    cli.overrides.apply(&mut cfg);
    cfg.validate().context("invalid configuration")?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .context("starting worker pool")?;
    let ds = Dataset::new(&cfg.workspace, &cfg.dataset);
    let record = |stage: &str| cfg.write_effective(&ds.config_dir(), stage);

    match cli.command {
        Command::Gen { sweep } => {
            let n = if sweep {
                stages::gen_sweep(&cfg, &ds)?
            } else {
                stages::gen(&cfg, &ds)?
            };
            record("gen")?;
            summary("gen", &ds, n)?;
        }
        Command::Evidence => {
            let n = stages::evidence(&cfg, &ds)?;
            record("evidence")?;
            summary("evidence", &ds, n)?;
        }
        Command::Simulate => {
            let n = stages::simulate(&cfg, &ds)?;
            record("simulate")?;
            summary("simulate", &ds, n)?;
        }
        Command::Score => {
            let n = stages::score(&cfg, &ds)?;
            record("score")?;
            summary("score", &ds, n)?;
        }
        Command::Detect => {
            let (o, r) = stages::detect(&cfg, &ds)?;
            record("detect")?;
            println!(
                "{}",
                serde_json::json!({
                    "stage": "detect",
                    "dataset": ds.dir.display().to_string(),
                    "ocr_heads": o.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
                    "retrieval_heads": r.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
                })
            );
        }
        Command::Compare => {
            let n = stages::compare(&cfg, &ds)?;
            record("compare")?;
            summary("compare", &ds, n)?;
        }
        Command::Plot => {
            let files = plot(&ds)?;
            record("plot")?;
            summary("plot", &ds, files.len())?;
        }
        Command::Intervene { action } => intervene_cmd(&cfg, &ds, action)?,
        Command::Validate { paths } => {
            let mut failed = 0usize;
            let mut first_err = None;
            for root in &paths {
                for file in collect(root)? {
                    match validate_file(&file) {
                        Ok(c) => println!("{}", serde_json::to_string(&c)?),
                        Err(e) => {
                            failed += 1;
                            eprintln!("{}", serde_json::to_string(&classify(&e))?);
                            first_err.get_or_insert(e);
                        }
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e.context(format!("{failed} file(s) failed validation")));
            }
        }
        Command::F1 { prediction, gold, file } => {
            let f1 = match (file, prediction, gold) {
                (Some(f), _, _) => f1_file(&f)?,
                (None, Some(p), Some(g)) => token_f1(&p, &g),
                _ => bail!("f1 needs PREDICTION and GOLD, or --file"),
            };
            println!("{}", serde_json::json!({ "f1": f1 }));
        }
    }
    Ok(())
}

fn intervene_cmd(cfg: &RunConfig, ds: &Dataset, action: InterveneAction) -> Result<()> {
    let beta = cfg.intervene.beta;
    let rule = cfg.intervene.sink_update_rule;
    match action {
        InterveneAction::Plan {
            source,
            kind,
            top,
            plan_seed,
            out,
        } => {
            let plan = match source {
                PlanSource::Random => {
                    let (ocr, _) = stages::load_aggregates(ds)?;
                    let p = random_head_plan(ocr.num_layers, ocr.num_heads, top, plan_seed)?;
                    match kind {
                        InterventionKind::Mask => p,
                        InterventionKind::Redistribute => {
                            let label = p.label.clone().unwrap_or_default();
                            ocrhead_core::interventions::InterventionPlan::redistribute(p.heads, beta, rule)
                                .with_label(label)
                        }
                    }
                }
                PlanSource::Ocr | PlanSource::Retrieval => {
                    let (ocr, ret) = stages::load_aggregates(ds)?;
                    let agg = if matches!(source, PlanSource::Ocr) { ocr } else { ret };
                    intervene::top_plan(&agg, kind, top, beta, rule)?
                }
            };
            intervene::write_plan(&out, &plan)?;
            println!(
                "{}",
                serde_json::json!({ "stage": "intervene", "plan": out.display().to_string() })
            );
        }
        InterveneAction::Preset { preset } => {
            let (ocr, ret) = stages::load_aggregates(ds)?;
            let dir = ds.dir.join("plans");
            let files = match preset {
                Preset::MaskSweep => intervene::mask_sweep(&dir, &ocr, &ret)?,
                Preset::Redistribute => intervene::redistribute_preset(&dir, &ocr, &ret, beta, rule)?,
            };
            cfg.write_effective(&ds.config_dir(), "intervene")?;
            summary("intervene", ds, files.len())?;
        }
        InterveneAction::Apply { plan, input, output } => {
            let format = cfg.output.trace_format;
            if let (Some(i), Some(o)) = (input, output) {
                let report = intervene::apply(&plan, &i, &o, format)?;
                println!("{}", serde_json::to_string(&report)?);
                return Ok(());
            }
            let stem = plan
                .file_stem()
                .and_then(|s| s.to_str())
                .context("plan file name")?
                .to_string();
            let out_dir = ds.dir.join("intervened").join(&stem);
            let mut traces: Vec<PathBuf> = collect(&ds.traces_dir())?;
            traces.retain(|p| p.is_file());
            let mut rows = 0;
            for t in &traces {
                let name = t.file_name().and_then(|s| s.to_str()).context("trace file name")?;
                let id = name.trim_end_matches(".jsonl").trim_end_matches(".trace");
                let dst = Dataset { dir: out_dir.clone() }.trace(id, format);
                std::fs::create_dir_all(dst.parent().expect("trace path has a parent"))?;
                rows += intervene::apply(&plan, t, &dst, format)?.rows_modified;
            }
            cfg.write_effective(&out_dir.join("config"), "intervene")?;
            println!(
                "{}",
                serde_json::json!({
                    "stage": "intervene",
                    "output": out_dir.display().to_string(),
                    "traces": traces.len(),
                    "rows_modified": rows,
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_OK as u8);
        }
        Err(e) => {
            let err = anyhow::Error::new(e);
            let mut rec = classify(&err);
            rec.error = "UsageError".into();
            rec.exit_code = EXIT_VALIDATION;
            eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let rec = classify(&e);
            eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
            ExitCode::from(rec.exit_code as u8)
        }
    }
}
