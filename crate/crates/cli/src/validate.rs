// SPDX-License-Identifier: MIT OR Apache-2.0

//! `validate`: schema checks for any artifact the toolkit reads or writes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use ocrhead_core::interventions::InterventionPlan;
use ocrhead_core::records::read_records;
use ocrhead_core::textimage::GrayImage;
use ocrhead_core::trace::{read_trace, MAGIC};

use crate::config::RunConfig;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Serialize)]
pub struct Checked {
    pub file: String,
    pub kind: &'static str,
    pub items: usize,
}

fn sniff_trace_text(bytes: &[u8]) -> bool {
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    serde_json::from_slice::<serde_json::Value>(first)
        .ok()
        .and_then(|v| v.get("format").and_then(|f| f.as_str()).map(|f| f == "ocrhead-trace"))
        .unwrap_or(false)
}

/// Checks one file; the kind is sniffed from content first, then extension.
pub fn validate_file(path: &Path) -> Result<Checked> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    let file = path.display().to_string();
    let ctx = || format!("validating {}", path.display());
    let (kind, items) = if bytes.starts_with(MAGIC) || sniff_trace_text(&bytes) {
        let t = read_trace(path).with_context(ctx)?;
        ("trace", t.num_steps())
    } else if bytes.starts_with(PNG_SIGNATURE) {
        GrayImage::from_png(&bytes)
            .map_err(anyhow::Error::msg)
            .with_context(ctx)?;
        ("png", 1)
    } else {
        match ext {
            "jsonl" => ("records", read_records(path).with_context(ctx)?.len()),
            "json" => {
                let plan: InterventionPlan = serde_json::from_slice(&bytes).with_context(ctx)?;
                plan.validate().with_context(ctx)?;
                ("plan", plan.heads.len())
            }
            "toml" => {
                let text = std::str::from_utf8(&bytes).with_context(ctx)?;
                RunConfig::parse(text)
                    .and_then(|c| c.validate().map(|_| c))
                    .with_context(ctx)?;
                ("config", 1)
            }
            "csv" => {
                let mut r = csv::Reader::from_reader(bytes.as_slice());
                let mut n = 0;
                for row in r.records() {
                    row.with_context(ctx)?;
                    n += 1;
                }
                ("csv", n)
            }
            "svg" => {
                let text = std::str::from_utf8(&bytes).with_context(ctx)?;
                let t = text.trim();
                if !t.starts_with("<svg") || !t.ends_with("</svg>") {
                    bail!("{file}: not a standalone SVG document");
                }
                ("svg", 1)
            }
            _ => bail!("{file}: unrecognised artifact type"),
        }
    };
    Ok(Checked { file, kind, items })
}

/// Files under `path` (recursively for directories), in sorted order.
pub fn collect(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for e in entries {
        out.extend(collect(&e)?);
    }
    Ok(out)
}
