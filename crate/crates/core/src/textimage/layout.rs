// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{InstanceSpec, RenderConfig, RenderError};

/// Logical position of one answer character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharPosition {
    pub page: usize,
    pub line: u32,
    pub col: u32,
    pub ch: char,
}

/// Where the needle sentence sits: one line, columns `col_start..col_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleSpan {
    pub page: usize,
    pub line: u32,
    pub col_start: u32,
    pub col_end: u32,
}

/// Text lines per page plus the exact answer character positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLayout {
    pub pages: Vec<Vec<String>>,
    pub answer_positions: Vec<CharPosition>,
    pub needle: NeedleSpan,
}

impl TextLayout {
    pub fn line_count(&self) -> usize {
        self.pages.iter().map(Vec::len).sum()
    }
}

/// Greedy word wrap. Words longer than a line are hard-split.
pub(crate) fn wrap_words(text: &str, width: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut current = String::new();
    let mut current_len = 0usize;
    for word in text.split_whitespace() {
        let mut chars: Vec<char> = word.chars().collect();
        while chars.len() > width {
            if current_len > 0 {
                lines.push(std::mem::take(&mut current));
                current_len = 0;
            }
            lines.push(chars.drain(..width).collect());
        }
        if chars.is_empty() {
            continue;
        }
        let needed = if current_len == 0 {
            chars.len()
        } else {
            current_len + 1 + chars.len()
        };
        if needed > width {
            lines.push(std::mem::take(&mut current));
            current_len = 0;
        }
        if current_len > 0 {
            current.push(' ');
            current_len += 1;
        }
        current.extend(chars.iter());
        current_len += chars.len();
    }
    if current_len > 0 {
        lines.push(current);
    }
    lines
}

/// Line index in `0..=filler_lines` whose fraction `i / filler_lines` is
/// nearest to `depth`. Halves round up.
pub(crate) fn needle_line_index(depth: f64, filler_lines: usize) -> usize {
    let idx = (depth * filler_lines as f64 + 0.5).floor() as usize;
    idx.min(filler_lines)
}

/// Wraps filler at `chars_per_line`, inserts the needle on its own line at
/// the requested depth, and paginates every `lines_per_page` lines.
pub fn layout_text(spec: &InstanceSpec, config: &RenderConfig) -> Result<TextLayout, RenderError> {
    config.validate(None)?;
    spec.validate()?;

    let width = config.chars_per_line as usize;
    let needle_chars = spec.needle_text.chars().count();
    if needle_chars > width {
        return Err(RenderError::ConfigTooSmall {
            needle_chars,
            chars_per_line: config.chars_per_line,
        });
    }

    let mut lines = wrap_words(&spec.filler_text, width);
    let needle_at = needle_line_index(spec.needle_depth, lines.len());
    lines.insert(needle_at, spec.needle_text.clone());

    let per_page = config.lines_per_page as usize;
    let page = needle_at / per_page;
    let line = (needle_at % per_page) as u32;

    let col_start = spec.answer_col().expect("validated: answer occurs in the needle") as u32;
    let answer_positions: Vec<CharPosition> = spec
        .answer
        .chars()
        .enumerate()
        .map(|(i, ch)| CharPosition {
            page,
            line,
            col: col_start + i as u32,
            ch,
        })
        .collect();

    // The needle is a single line, so its characters share one page.
    if answer_positions.iter().any(|p| p.page != page) {
        return Err(RenderError::AnswerSplitAcrossPages);
    }

    let pages = lines.chunks(per_page).map(<[String]>::to_vec).collect();
    Ok(TextLayout {
        pages,
        answer_positions,
        needle: NeedleSpan {
            page,
            line,
            col_start: 0,
            col_end: needle_chars as u32,
        },
    })
}
