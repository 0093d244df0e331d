// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch-token geometry: uniform N x N grids, multi-image token layouts and
//! evidence patch tokens (patches overlapping answer boxes).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textimage::CharBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("image {width}x{height} is not divisible by patch size {patch}")]
    IndivisibleImage { width: u32, height: u32, patch: u32 },
    #[error("token index {index} out of range for {len} tokens")]
    OutOfRange { index: usize, len: usize },
    #[error("no patch overlaps an answer box above threshold {threshold}")]
    EmptyEvidence { threshold: f64 },
    #[error("invalid token layout: {0}")]
    InvalidLayout(String),
    #[error("annotation refers to page {page} but the layout has {images} images")]
    PageMismatch { page: usize, images: usize },
}

/// Half-open pixel rectangle `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl Rect {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> u64 {
        self.x_max.saturating_sub(self.x_min) as u64 * self.y_max.saturating_sub(self.y_min) as u64
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }
}

impl From<&CharBox> for Rect {
    fn from(b: &CharBox) -> Self {
        Rect::new(b.x_min, b.y_min, b.x_max, b.y_max)
    }
}

/// How a box/patch overlap ratio is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// `|A ∩ B| / |A ∪ B|`.
    #[default]
    Iou,
    /// `|A ∩ B| / |patch|`.
    IntersectionOverPatch,
}

impl std::str::FromStr for OverlapMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iou" => Ok(Self::Iou),
            "intersection_over_patch" => Ok(Self::IntersectionOverPatch),
            other => Err(format!("unknown overlap mode {other:?}")),
        }
    }
}

/// Overlap ratio in `[0, 1]` between an answer box and a patch rectangle.
pub fn overlap(bx: &Rect, patch: &Rect, mode: OverlapMode) -> f64 {
    let inter = bx.intersection_area(patch);
    if inter == 0 {
        return 0.0;
    }
    let denom = match mode {
        OverlapMode::Iou => bx.area() + patch.area() - inter,
        OverlapMode::IntersectionOverPatch => patch.area(),
    };
    inter as f64 / denom as f64
}

/// Number of patch tokens for a `width x height` image at patch size `patch`.
pub fn token_count(width: u32, height: u32, patch: u32) -> Result<usize, PatchError> {
    Ok(PatchGrid::new(width, height, patch)?.len())
}

/// Row-major tessellation of one image into `patch x patch` tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_width: u32,
    pub image_height: u32,
    pub patch_size: u32,
}

impl PatchGrid {
    pub fn new(image_width: u32, image_height: u32, patch_size: u32) -> Result<Self, PatchError> {
        if patch_size == 0 || !image_width.is_multiple_of(patch_size) || !image_height.is_multiple_of(patch_size) {
            return Err(PatchError::IndivisibleImage {
                width: image_width,
                height: image_height,
                patch: patch_size,
            });
        }
        Ok(Self {
            image_width,
            image_height,
            patch_size,
        })
    }

    pub fn cols(&self) -> u32 {
        self.image_width / self.patch_size
    }

    pub fn rows(&self) -> u32 {
        self.image_height / self.patch_size
    }

    pub fn len(&self) -> usize {
        self.cols() as usize * self.rows() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel rectangle of local token `index` in row-major scan order.
    pub fn patch_rect(&self, index: usize) -> Result<Rect, PatchError> {
        if index >= self.len() {
            return Err(PatchError::OutOfRange { index, len: self.len() });
        }
        let n = self.patch_size;
        let cols = self.cols() as usize;
        let x = (index % cols) as u32 * n;
        let y = (index / cols) as u32 * n;
        Ok(Rect::new(x, y, x + n, y + n))
    }

    /// Local indices of patches that intersect `r` at all.
    fn candidates(&self, r: &Rect) -> impl Iterator<Item = usize> + '_ {
        let n = self.patch_size;
        let c0 = (r.x_min / n).min(self.cols());
        let c1 = r.x_max.div_ceil(n).min(self.cols());
        let r0 = (r.y_min / n).min(self.rows());
        let r1 = r.y_max.div_ceil(n).min(self.rows());
        let cols = self.cols() as usize;
        (r0..r1).flat_map(move |row| (c0..c1).map(move |col| row as usize * cols + col as usize))
    }
}

/// Placement of one image's patch tokens in the model input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpan {
    pub grid: PatchGrid,
    pub global_offset: usize,
}

impl ImageSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.global_offset..self.global_offset + self.grid.len()
    }
}

/// Where each image's patch tokens live in the full input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub images: Vec<ImageSpan>,
    pub total_len: usize,
    #[serde(default)]
    pub sink_index: usize,
}

impl TokenLayout {
    /// `prefix` text tokens (the first is the sink), then every image with
    /// `separator` tokens between consecutive images, then `suffix` tokens.
    pub fn sequential(grids: &[PatchGrid], prefix: usize, separator: usize, suffix: usize) -> Self {
        let mut images = Vec::with_capacity(grids.len());
        let mut cursor = prefix;
        for (i, grid) in grids.iter().enumerate() {
            if i > 0 {
                cursor += separator;
            }
            images.push(ImageSpan {
                grid: *grid,
                global_offset: cursor,
            });
            cursor += grid.len();
        }
        Self {
            images,
            total_len: cursor + suffix,
            sink_index: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        if self.total_len == 0 {
            return Err(PatchError::InvalidLayout("total_len must be >= 1".into()));
        }
        if self.sink_index >= self.total_len {
            return Err(PatchError::InvalidLayout(format!(
                "sink_index {} >= total_len {}",
                self.sink_index, self.total_len
            )));
        }
        let mut end = 0usize;
        for (i, span) in self.images.iter().enumerate() {
            PatchGrid::new(span.grid.image_width, span.grid.image_height, span.grid.patch_size)?;
            if i > 0 && span.global_offset < end {
                return Err(PatchError::InvalidLayout(format!(
                    "image {i} overlaps or precedes image {}",
                    i - 1
                )));
            }
            end = span.range().end;
            if end > self.total_len {
                return Err(PatchError::InvalidLayout(format!("image {i} ends past total_len")));
            }
        }
        Ok(())
    }

    pub fn image_token_count(&self) -> usize {
        self.images.iter().map(|s| s.grid.len()).sum()
    }

    pub fn is_image_token(&self, global: usize) -> bool {
        self.locate(global).is_some()
    }

    /// Global positions not covered by any image span.
    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.total_len).filter(|&g| !self.is_image_token(g)).collect()
    }

    /// `(image, local index)` for a global token index inside an image span.
    pub fn locate(&self, global: usize) -> Option<(usize, usize)> {
        let i = self.images.partition_point(|s| s.global_offset <= global);
        let i = i.checked_sub(1)?;
        let span = &self.images[i];
        span.range().contains(&global).then(|| (i, global - span.global_offset))
    }

    /// `(image, row, col)` for a global token index.
    pub fn locate_cell(&self, global: usize) -> Option<(usize, u32, u32)> {
        let (image, local) = self.locate(global)?;
        let cols = self.images[image].grid.cols() as usize;
        Some((image, (local / cols) as u32, (local % cols) as u32))
    }

    pub fn global_index(&self, image: usize, row: u32, col: u32) -> Option<usize> {
        let span = self.images.get(image)?;
        (row < span.grid.rows() && col < span.grid.cols())
            .then(|| span.global_offset + row as usize * span.grid.cols() as usize + col as usize)
    }
}

/// Global input-token indices whose patches overlap an answer box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub instance_id: String,
    pub indices: BTreeSet<usize>,
    pub threshold: f64,
    pub mode: OverlapMode,
}

impl EvidenceSet {
    pub fn contains(&self, global: usize) -> bool {
        self.indices.contains(&global)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Collects every patch whose overlap with some answer box is strictly
/// greater than `threshold`. Box page indices address `layout.images`.
pub fn evidence_tokens(
    instance_id: &str,
    annotations: &[CharBox],
    layout: &TokenLayout,
    threshold: f64,
    mode: OverlapMode,
) -> Result<EvidenceSet, PatchError> {
    let mut indices = BTreeSet::new();
    for b in annotations {
        let span = layout.images.get(b.page_index).ok_or(PatchError::PageMismatch {
            page: b.page_index,
            images: layout.images.len(),
        })?;
        let rect = Rect::from(b);
        for local in span.grid.candidates(&rect) {
            let patch = span.grid.patch_rect(local)?;
            if overlap(&rect, &patch, mode) > threshold {
                indices.insert(span.global_offset + local);
            }
        }
    }
    if indices.is_empty() {
        return Err(PatchError::EmptyEvidence { threshold });
    }
    Ok(EvidenceSet {
        instance_id: instance_id.to_string(),
        indices,
        threshold,
        mode,
    })
}
