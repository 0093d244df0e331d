// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rendering of passkey / needle-in-a-haystack contexts into multi-page
//! grayscale images with exact per-character answer boxes.
//!
//! The pipeline is `InstanceSpec` -> [`layout_text`] -> [`render_instance`],
//! optionally followed by [`resize_instance`]. Everything here is a pure
//! function of its inputs: the same spec and config always produce the same
//! bytes.

mod corpus;
pub mod font;
mod layout;
mod resize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{generate_spec, make_character_sweep, sweep_characters, SWEEP_DEPTH};
pub use layout::{layout_text, CharPosition, NeedleSpan, TextLayout};
pub use resize::{resize_instance, ScaleFactor};

/// Errors raised while validating, laying out, rendering or resizing instances.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error("invalid instance spec: {0}")]
    InvalidSpec(String),
    #[error("needle text of {needle_chars} chars does not fit a {chars_per_line}-char line")]
    ConfigTooSmall { needle_chars: usize, chars_per_line: u32 },
    #[error("answer would be split across a page boundary")]
    AnswerSplitAcrossPages,
    #[error("character {0:?} has no glyph in the embedded font")]
    UnsupportedCharacter(char),
    #[error("resize by {factor} gives non-integral {what}")]
    NonIntegralResize { factor: String, what: String },
    #[error("page size {width}x{height} is not a multiple of patch size {patch}")]
    PatchMisaligned { width: u32, height: u32, patch: u32 },
}

/// Geometry and colors used to rasterize text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub glyph_width: u32,
    pub glyph_height: u32,
    pub chars_per_line: u32,
    pub lines_per_page: u32,
    pub margin: u32,
    pub foreground: u8,
    pub background: u8,
    pub font_id: String,
}

impl Default for RenderConfig {
    /// 42 x 14 cells of 7 x 14 pixels: a 294 x 196 page, 21 x 14 patches at N = 14.
    fn default() -> Self {
        Self {
            glyph_width: 7,
            glyph_height: 14,
            chars_per_line: 42,
            lines_per_page: 14,
            margin: 0,
            foreground: 0,
            background: 255,
            font_id: font::FONT_ID.to_string(),
        }
    }
}

impl RenderConfig {
    pub fn page_width(&self) -> u32 {
        2 * self.margin + self.chars_per_line * self.glyph_width
    }

    pub fn page_height(&self) -> u32 {
        2 * self.margin + self.lines_per_page * self.glyph_height
    }

    /// Checks the config, and page/patch alignment when `patch_size` is given.
    pub fn validate(&self, patch_size: Option<u32>) -> Result<(), RenderError> {
        let positive = [
            ("glyph_width", self.glyph_width),
            ("glyph_height", self.glyph_height),
            ("chars_per_line", self.chars_per_line),
            ("lines_per_page", self.lines_per_page),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(RenderError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.foreground == self.background {
            return Err(RenderError::InvalidConfig(
                "foreground and background must differ".into(),
            ));
        }
        if self.font_id != font::FONT_ID {
            return Err(RenderError::InvalidConfig(format!(
                "unknown font_id {:?}, only {:?} is embedded",
                self.font_id,
                font::FONT_ID
            )));
        }
        if font::placement(self.glyph_width, self.glyph_height).is_none() {
            return Err(RenderError::InvalidConfig(format!(
                "glyph cell {}x{} is too small for the {}x{} font",
                self.glyph_width,
                self.glyph_height,
                font::GLYPH_COLS + 1,
                font::GLYPH_ROWS + 1
            )));
        }
        if let Some(patch) = patch_size {
            check_patch_alignment(self.page_width(), self.page_height(), patch)?;
        }
        Ok(())
    }
}

pub(crate) fn check_patch_alignment(width: u32, height: u32, patch: u32) -> Result<(), RenderError> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(RenderError::PatchMisaligned { width, height, patch });
    }
    Ok(())
}

/// Task family of a generated instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Passkey,
    Niah,
    SingleChar,
}

/// Everything needed to lay out and render one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub kind: InstanceKind,
    pub filler_text: String,
    pub needle_text: String,
    pub answer: String,
    /// Character offset of the answer inside the needle; the first
    /// occurrence when absent.
    #[serde(default)]
    pub answer_offset: Option<usize>,
    pub needle_depth: f64,
    pub page_count_target: u32,
    pub question: String,
    pub seed: u64,
}

impl InstanceSpec {
    /// Character column of the answer within the needle line.
    pub fn answer_col(&self) -> Option<usize> {
        match self.answer_offset {
            Some(off) => {
                let tail: String = self.needle_text.chars().skip(off).collect();
                tail.starts_with(&self.answer).then_some(off)
            }
            None => {
                let byte = self.needle_text.find(&self.answer)?;
                Some(self.needle_text[..byte].chars().count())
            }
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.answer.is_empty() {
            return Err(RenderError::InvalidSpec("answer is empty".into()));
        }
        if !self.needle_text.contains(&self.answer) {
            return Err(RenderError::InvalidSpec(format!(
                "answer {:?} is not a substring of needle {:?}",
                self.answer, self.needle_text
            )));
        }
        if self.answer_col().is_none() {
            return Err(RenderError::InvalidSpec(format!(
                "answer {:?} does not occur at offset {:?} of the needle",
                self.answer, self.answer_offset
            )));
        }
        if !(0.0..=1.0).contains(&self.needle_depth) {
            return Err(RenderError::InvalidSpec(format!(
                "needle_depth {} outside [0, 1]",
                self.needle_depth
            )));
        }
        if self.page_count_target == 0 {
            return Err(RenderError::InvalidSpec("page_count_target must be >= 1".into()));
        }
        for c in self.filler_text.chars().chain(self.needle_text.chars()) {
            if !c.is_whitespace() && !font::is_supported(c) {
                return Err(RenderError::UnsupportedCharacter(c));
            }
        }
        Ok(())
    }
}

/// Pixel-space box around one answer character. Max edges are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharBox {
    pub page_index: usize,
    pub char: char,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl CharBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

/// An 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; (width as usize) * (height as usize)],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    fn set(&mut self, x: u32, y: u32, value: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = value;
    }

    /// Encodes as an 8-bit grayscale PNG with fixed encoder settings.
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width, self.height);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Eight);
            encoder.set_compression(png::Compression::Fast);
            encoder.set_filter(png::Filter::Up);
            let mut writer = encoder.write_header().expect("in-memory PNG header");
            writer.write_image_data(&self.pixels).expect("in-memory PNG body");
        }
        out
    }

    /// Decodes an 8-bit grayscale PNG. Other color types are rejected.
    pub fn from_png(bytes: &[u8]) -> Result<Self, String> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let (color, depth) = reader.output_color_type();
        if color != png::ColorType::Grayscale || depth != png::BitDepth::Eight {
            return Err(format!("expected 8-bit grayscale, got {color:?}/{depth:?}"));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| "image too large".to_string())?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width,
            height: info.height,
            pixels: buf,
        })
    }
}

/// A rendered multi-page instance with its ground-truth answer boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedInstance {
    pub pages: Vec<GrayImage>,
    pub annotations: Vec<CharBox>,
    pub question: String,
    pub answer: String,
    pub needle_span: NeedleSpan,
    pub config: RenderConfig,
    /// Cumulative resize factor applied since rendering.
    pub scale: ScaleFactor,
}

impl RenderedInstance {
    pub fn page_size(&self) -> (u32, u32) {
        self.pages.first().map(|p| (p.width, p.height)).unwrap_or((0, 0))
    }
}

/// Lays out and rasterizes `spec`.
pub fn render_instance(spec: &InstanceSpec, config: &RenderConfig) -> Result<RenderedInstance, RenderError> {
    let layout = layout_text(spec, config)?;
    let place = font::placement(config.glyph_width, config.glyph_height).expect("validated by layout_text");
    let (w, h) = (config.page_width(), config.page_height());

    let mut pages = Vec::with_capacity(layout.pages.len());
    for lines in &layout.pages {
        let mut page = GrayImage::filled(w, h, config.background);
        for (line_idx, line) in lines.iter().enumerate() {
            for (col, c) in line.chars().enumerate() {
                let cell_x = config.margin + col as u32 * config.glyph_width;
                let cell_y = config.margin + line_idx as u32 * config.glyph_height;
                stamp(&mut page, c, cell_x, cell_y, place, config.foreground);
            }
        }
        pages.push(page);
    }

    let annotations = layout.answer_positions.iter().map(|p| cell_box(config, p)).collect();

    Ok(RenderedInstance {
        pages,
        annotations,
        question: spec.question.clone(),
        answer: spec.answer.clone(),
        needle_span: layout.needle,
        config: config.clone(),
        scale: ScaleFactor::ONE,
    })
}

fn cell_box(config: &RenderConfig, p: &CharPosition) -> CharBox {
    let x_min = config.margin + p.col * config.glyph_width;
    let y_min = config.margin + p.line * config.glyph_height;
    CharBox {
        page_index: p.page,
        char: p.ch,
        x_min,
        y_min,
        x_max: x_min + config.glyph_width,
        y_max: y_min + config.glyph_height,
    }
}

fn stamp(page: &mut GrayImage, c: char, cell_x: u32, cell_y: u32, place: font::GlyphPlacement, fg: u8) {
    for col in 0..font::GLYPH_COLS {
        for row in 0..font::GLYPH_ROWS {
            if !font::lit(c, col, row) {
                continue;
            }
            let x0 = cell_x + place.x_offset + col * place.scale;
            let y0 = cell_y + place.y_offset + row * place.scale;
            for dy in 0..place.scale {
                for dx in 0..place.scale {
                    page.set(x0 + dx, y0 + dy, fg);
                }
            }
        }
    }
}
