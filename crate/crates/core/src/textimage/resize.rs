// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{check_patch_alignment, CharBox, GrayImage, RenderError, RenderedInstance};

/// Positive rational resize factor, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct ScaleFactor(Ratio<u32>);

impl ScaleFactor {
    pub const ONE: ScaleFactor = ScaleFactor(Ratio::new_raw(1, 1));

    pub fn new(numer: u32, denom: u32) -> Result<Self, RenderError> {
        if numer == 0 || denom == 0 {
            return Err(RenderError::InvalidSpec(format!(
                "resize factor {numer}/{denom} must be positive"
            )));
        }
        Ok(Self(Ratio::new(numer, denom)))
    }

    pub fn numer(&self) -> u32 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u32 {
        *self.0.denom()
    }

    /// `value * self` when that is an integer.
    pub fn apply(&self, value: u32) -> Option<u32> {
        let scaled = value as u64 * self.numer() as u64;
        scaled
            .is_multiple_of(self.denom() as u64)
            .then(|| (scaled / self.denom() as u64) as u32)
    }

    fn compose(self, other: ScaleFactor) -> ScaleFactor {
        ScaleFactor(self.0 * other.0)
    }
}

impl TryFrom<(u32, u32)> for ScaleFactor {
    type Error = RenderError;
    fn try_from((n, d): (u32, u32)) -> Result<Self, Self::Error> {
        Self::new(n, d)
    }
}

impl From<ScaleFactor> for (u32, u32) {
    fn from(f: ScaleFactor) -> Self {
        (f.numer(), f.denom())
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

fn non_integral(factor: ScaleFactor, what: impl Into<String>) -> RenderError {
    RenderError::NonIntegralResize {
        factor: factor.to_string(),
        what: what.into(),
    }
}

/// Area-averaging resample by `numer / denom`.
///
/// In a common coordinate system scaled by `numer * denom`, input pixel `i`
/// spans `[i*numer, (i+1)*numer)` and output pixel `o` spans
/// `[o*denom, (o+1)*denom)`. Each output is the overlap-weighted mean of the
/// inputs, rounded half up, in integer arithmetic.
fn resample(img: &GrayImage, factor: ScaleFactor, out_w: u32, out_h: u32) -> GrayImage {
    let (p, q) = (factor.numer() as u64, factor.denom() as u64);
    let weights = |out_len: u32, in_len: u32| -> Vec<Vec<(usize, u64)>> {
        (0..out_len as u64)
            .map(|o| {
                let (lo, hi) = (o * q, (o + 1) * q);
                let first = lo / p;
                let last = ((hi - 1) / p).min(in_len as u64 - 1);
                (first..=last)
                    .filter_map(|i| {
                        let overlap = hi.min((i + 1) * p).saturating_sub(lo.max(i * p));
                        (overlap > 0).then_some((i as usize, overlap))
                    })
                    .collect()
            })
            .collect()
    };
    let wx = weights(out_w, img.width);
    let wy = weights(out_h, img.height);
    let total = q * q;
    let mut out = GrayImage::filled(out_w, out_h, 0);
    for (oy, row_w) in wy.iter().enumerate() {
        for (ox, col_w) in wx.iter().enumerate() {
            let mut acc = 0u64;
            for &(iy, wy) in row_w {
                for &(ix, wx) in col_w {
                    acc += img.pixels[iy * img.width as usize + ix] as u64 * wx * wy;
                }
            }
            out.pixels[oy * out_w as usize + ox] = ((2 * acc + total) / (2 * total)) as u8;
        }
    }
    out
}

/// Resizes every page by `factor` and scales every answer box exactly.
///
/// When `patch_size` is given the new page dimensions must be multiples of it.
pub fn resize_instance(
    inst: &RenderedInstance,
    factor: ScaleFactor,
    patch_size: Option<u32>,
) -> Result<RenderedInstance, RenderError> {
    let (w, h) = inst.page_size();
    let out_w = factor
        .apply(w)
        .ok_or_else(|| non_integral(factor, format!("page width {w}")))?;
    let out_h = factor
        .apply(h)
        .ok_or_else(|| non_integral(factor, format!("page height {h}")))?;
    if out_w == 0 || out_h == 0 {
        return Err(non_integral(factor, "empty page"));
    }
    if let Some(patch) = patch_size {
        check_patch_alignment(out_w, out_h, patch)?;
    }

    let annotations = inst
        .annotations
        .iter()
        .map(|b| {
            let scale = |v: u32, name: &str| {
                factor
                    .apply(v)
                    .ok_or_else(|| non_integral(factor, format!("{name} {v} of box {:?}", b.char)))
            };
            Ok(CharBox {
                x_min: scale(b.x_min, "x_min")?,
                y_min: scale(b.y_min, "y_min")?,
                x_max: scale(b.x_max, "x_max")?,
                y_max: scale(b.y_max, "y_max")?,
                ..*b
            })
        })
        .collect::<Result<Vec<_>, RenderError>>()?;

    let pages = if factor == ScaleFactor::ONE {
        inst.pages.clone()
    } else {
        inst.pages.iter().map(|p| resample(p, factor, out_w, out_h)).collect()
    };

    Ok(RenderedInstance {
        pages,
        annotations,
        scale: inst.scale.compose(factor),
        ..inst.clone()
    })
}
