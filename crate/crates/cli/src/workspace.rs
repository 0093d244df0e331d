// SPDX-License-Identifier: MIT OR Apache-2.0

//! File locations inside a workspace. Each dataset (`main`, `sweep`, ...)
//! lives in its own directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ocrhead_core::records::{read_records, write_records, Record};
use ocrhead_core::trace::TraceFormat;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
}

impl Dataset {
    pub fn new(workspace: &Path, name: &str) -> Self {
        Self {
            dir: workspace.join(name),
        }
    }

    pub fn instances(&self) -> PathBuf {
        self.dir.join("instances.jsonl")
    }

    pub fn pages_dir(&self) -> PathBuf {
        self.dir.join("pages")
    }

    pub fn evidence(&self) -> PathBuf {
        self.dir.join("evidence.jsonl")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.dir.join("traces")
    }

    pub fn trace(&self, instance_id: &str, format: TraceFormat) -> PathBuf {
        let ext = match format {
            TraceFormat::Binary => "trace",
            TraceFormat::Jsonl => "trace.jsonl",
        };
        self.traces_dir().join(format!("{instance_id}.{ext}"))
    }

    /// The trace of `instance_id` in whichever format exists.
    pub fn find_trace(&self, instance_id: &str) -> Result<PathBuf> {
        for f in [TraceFormat::Binary, TraceFormat::Jsonl] {
            let p = self.trace(instance_id, f);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no trace for {instance_id} under {}", self.traces_dir().display()),
        )
        .into())
    }

    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.jsonl")
    }

    pub fn aggregates(&self) -> PathBuf {
        self.dir.join("aggregates.jsonl")
    }

    pub fn detections(&self) -> PathBuf {
        self.dir.join("detections.jsonl")
    }

    pub fn compare(&self) -> PathBuf {
        self.dir.join("compare.jsonl")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.dir.join("plots")
    }

    pub fn config_dir(&self) -> PathBuf {
        self.dir.join("config")
    }
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    read_records(path).with_context(|| format!("reading {}", path.display()))
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_records(path, records).with_context(|| format!("writing {}", path.display()))
}
