// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file covering every stage, with CLI flags as
//! overrides. The merged configuration is written next to each stage's outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ocrhead_core::interventions::{SinkUpdateRule, DEFAULT_BETA};
use ocrhead_core::patch::OverlapMode;
use ocrhead_core::scoring::{OcrCriteria, ScoringOptions, TokenMatch};
use ocrhead_core::textimage::RenderConfig;
use ocrhead_core::trace::{Fidelity, TraceFormat};
use ocrhead_core::HeadId;

/// Image counts covered by `gen`: 2 through 12 pages.
pub const MIN_PAGES: u32 = 2;
pub const MAX_PAGES: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workspace: PathBuf,
    /// Dataset directory inside the workspace.
    pub dataset: String,
    pub seed: u64,
    /// Worker threads; 0 picks one per core.
    pub workers: usize,
    pub render: RenderConfig,
    pub gen: GenConfig,
    pub patch: PatchConfig,
    pub layout: LayoutConfig,
    pub scoring: ScoringConfig,
    pub simulate: SimulateConfig,
    pub compare: CompareConfig,
    pub intervene: InterveneConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("ocrhead-workspace"),
            dataset: "main".into(),
            seed: 20250101,
            workers: 0,
            render: RenderConfig::default(),
            gen: GenConfig::default(),
            patch: PatchConfig::default(),
            layout: LayoutConfig::default(),
            scoring: ScoringConfig::default(),
            simulate: SimulateConfig::default(),
            compare: CompareConfig::default(),
            intervene: InterveneConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Total instances spread evenly over 2..=12 pages; ignored when
    /// `counts` is given.
    pub total_instances: u32,
    /// Explicit instance count per page count 2..=12 (11 entries).
    pub counts: Option<Vec<u32>>,
    /// Resize applied after rendering, as `[numerator, denominator]`.
    pub resize: (u32, u32),
    /// Pages per character-sweep instance.
    pub sweep_pages: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            total_instances: 1200,
            counts: None,
            resize: (1, 1),
            sweep_pages: 2,
        }
    }
}

impl GenConfig {
    /// Instances per page count, index 0 = 2 pages.
    pub fn per_length(&self) -> Result<Vec<u32>> {
        let lengths = (MAX_PAGES - MIN_PAGES + 1) as usize;
        if let Some(c) = &self.counts {
            if c.len() != lengths {
                bail!("gen.counts needs {lengths} entries (pages 2..=12), got {}", c.len());
            }
            return Ok(c.clone());
        }
        let base = self.total_instances / lengths as u32;
        let extra = (self.total_instances % lengths as u32) as usize;
        Ok((0..lengths).map(|i| base + u32::from(i < extra)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub size: u32,
    pub overlap: OverlapMode,
    pub threshold: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 14,
            overlap: OverlapMode::Iou,
            threshold: 0.1,
        }
    }
}

/// Text tokens around the image tokens in the model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub prefix_tokens: usize,
    pub separator_tokens: usize,
    pub suffix_tokens: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            prefix_tokens: 4,
            separator_tokens: 1,
            suffix_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerChoice {
    Characters,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub tokenizer: TokenizerChoice,
    pub token_match: TokenMatch,
    pub positional_retrieval: bool,
    pub hit_threshold: f64,
    pub min_hit_fraction: f64,
    pub ocr_mean_threshold: f64,
    pub retrieval_mean_threshold: f64,
    /// Top-k heads per character for co-activation.
    pub coactivation_k: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        let c = OcrCriteria::default();
        Self {
            tokenizer: TokenizerChoice::Characters,
            token_match: TokenMatch::Exact,
            positional_retrieval: false,
            hit_threshold: c.per_instance_threshold,
            min_hit_fraction: c.min_hit_fraction,
            ocr_mean_threshold: c.mean_threshold,
            retrieval_mean_threshold: 0.1,
            coactivation_k: 5,
        }
    }
}

impl ScoringConfig {
    pub fn ocr_criteria(&self) -> OcrCriteria {
        OcrCriteria {
            per_instance_threshold: self.hit_threshold,
            min_hit_fraction: self.min_hit_fraction,
            mean_threshold: self.ocr_mean_threshold,
        }
    }

    pub fn options(&self) -> ScoringOptions {
        ScoringOptions {
            token_match: self.token_match,
            positional_retrieval: self.positional_retrieval,
        }
    }
}

/// A head planted by `simulate`, active on a fraction of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedHead {
    pub head: String,
    /// Probability that the head scores on a given instance.
    pub rate: f64,
}

impl SimulatedHead {
    pub fn head_id(&self) -> Result<HeadId> {
        self.head
            .parse()
            .map_err(|e| anyhow::anyhow!("simulate head {:?}: {e}", self.head))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub num_layers: u32,
    pub num_heads: u32,
    pub fidelity: Fidelity,
    pub noise: f64,
    pub ocr_heads: Vec<SimulatedHead>,
    pub retrieval_heads: Vec<SimulatedHead>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let h = |head: &str, rate| SimulatedHead {
            head: head.into(),
            rate,
        };
        Self {
            num_layers: 8,
            num_heads: 8,
            fidelity: Fidelity::ArgmaxOnly,
            noise: 0.0,
            ocr_heads: vec![h("L3H5", 0.9), h("L5H2", 0.8), h("L6H6", 0.6)],
            retrieval_heads: vec![h("L3H5", 0.5), h("L4H1", 0.9), h("L7H0", 0.7)],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Dataset whose single-character instances feed the co-activation report.
    pub coactivation_dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneConfig {
    pub beta: f64,
    pub sink_update_rule: SinkUpdateRule,
}

impl Default for InterveneConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            sink_update_rule: SinkUpdateRule::ScaleDown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub trace_format: TraceFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            trace_format: TraceFormat::Binary,
        }
    }
}

fn unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        bail!("{name} = {x} outside [0, 1]");
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))?
            }
            None => Self::default(),
        };
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate(Some(self.patch.size)).context("render")?;
        unit("patch.threshold", self.patch.threshold)?;
        let s = &self.scoring;
        unit("scoring.hit_threshold", s.hit_threshold)?;
        unit("scoring.min_hit_fraction", s.min_hit_fraction)?;
        unit("scoring.ocr_mean_threshold", s.ocr_mean_threshold)?;
        unit("scoring.retrieval_mean_threshold", s.retrieval_mean_threshold)?;
        unit("simulate.noise", self.simulate.noise)?;
        unit("intervene.beta", self.intervene.beta)?;
        if self.dataset.is_empty() || self.dataset.contains(['/', '\\']) || self.dataset.starts_with('.') {
            bail!("dataset name {:?} must be a plain directory name", self.dataset);
        }
        self.gen.per_length()?;
        if self.gen.resize.0 == 0 || self.gen.resize.1 == 0 {
            bail!("gen.resize must be positive");
        }
        if self.layout.prefix_tokens == 0 {
            bail!("layout.prefix_tokens must be >= 1 (position 0 is the sink)");
        }
        let sim = &self.simulate;
        if sim.num_layers == 0 || sim.num_heads == 0 {
            bail!("simulate needs at least one layer and head");
        }
        let mut seen_ocr = std::collections::BTreeSet::new();
        for h in &sim.ocr_heads {
            let id = h.head_id()?;
            unit("simulate.ocr_heads.rate", h.rate)?;
            if !id.within(sim.num_layers, sim.num_heads) || !seen_ocr.insert(id) {
                bail!("simulate.ocr_heads: {id} outside the model or repeated");
            }
        }
        let mut seen_ret = std::collections::BTreeSet::new();
        for h in &sim.retrieval_heads {
            let id = h.head_id()?;
            unit("simulate.retrieval_heads.rate", h.rate)?;
            if !id.within(sim.num_layers, sim.num_heads) || !seen_ret.insert(id) {
                bail!("simulate.retrieval_heads: {id} outside the model or repeated");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the effective configuration of `stage` into `dir`.
    pub fn write_effective(&self, dir: &Path, stage: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{stage}.toml"));
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
