// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in filler prose and instance builders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::wrap_words;
use super::{render_instance, InstanceKind, InstanceSpec, RenderConfig, RenderError, RenderedInstance};

const FILLER: &[&str] = &[
    "The grass is green and the sky is blue.",
    "The sun is yellow and the morning is calm.",
    "Here we go again along the quiet road.",
    "There and back again is a long walk.",
    "A small boat drifts slowly down the river.",
    "The old clock in the hall ticks every second.",
    "Rain falls softly on the roof of the barn.",
    "Birds gather on the wire before the storm.",
    "The baker opens the shop early each day.",
    "Leaves turn brown and drop in the autumn wind.",
    "A cat sleeps in the warm corner by the stove.",
    "The train leaves the station at noon.",
    "Children play in the park after school.",
    "The lamp glows dimly in the empty room.",
    "Snow covers the hills through the long winter.",
    "The market is busy on the first day of the week.",
];

const NIAH_WORDS: &[&str] = &[
    "lantern", "harbor", "granite", "violet", "meadow", "copper", "falcon", "quartz", "willow", "ember", "saffron",
    "glacier", "orchid", "canyon", "juniper", "marble",
];

/// Characters used by the single-character sweep.
pub fn sweep_characters() -> Vec<char> {
    ('0'..='9').chain('a'..='z').collect()
}

/// Needle depth used for every character-sweep instance.
pub const SWEEP_DEPTH: f64 = 0.5;

/// Needle, answer offset in characters, and question.
fn needle_and_question(kind: InstanceKind, answer: &str) -> (String, usize, String) {
    let (lead, tail, question) = match kind {
        InstanceKind::Passkey | InstanceKind::SingleChar => {
            ("The pass key is ", ". Remember it.", "What is the pass key?")
        }
        InstanceKind::Niah => ("The magic word is ", ". Keep it.", "What is the magic word?"),
    };
    (
        format!("{lead}{answer}{tail}"),
        lead.chars().count(),
        question.to_string(),
    )
}

fn random_answer(kind: InstanceKind, rng: &mut ChaCha8Rng) -> String {
    match kind {
        InstanceKind::Passkey => format!("{:05}", rng.random_range(0..100_000u32)),
        InstanceKind::Niah => NIAH_WORDS[rng.random_range(0..NIAH_WORDS.len())].to_string(),
        InstanceKind::SingleChar => {
            let chars = sweep_characters();
            chars[rng.random_range(0..chars.len())].to_string()
        }
    }
}

/// Filler that wraps to exactly `lines` lines at `width` characters.
fn filler_lines(rng: &mut ChaCha8Rng, width: usize, lines: usize) -> String {
    if lines == 0 {
        return String::new();
    }
    // Each wrapped line absorbs at most width + 1 chars, so this length
    // guarantees more than `lines` lines.
    let min_len = (lines + 1) * (width + 1);
    let mut text = String::new();
    while text.len() < min_len {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(FILLER[rng.random_range(0..FILLER.len())]);
    }
    wrap_words(&text, width)[..lines].join(" ")
}

/// Builds a spec whose filler plus needle fill exactly `page_count` pages.
///
/// `answer` is drawn from the seed when `None`.
pub fn generate_spec(
    kind: InstanceKind,
    answer: Option<&str>,
    needle_depth: f64,
    page_count: u32,
    seed: u64,
    config: &RenderConfig,
) -> Result<InstanceSpec, RenderError> {
    config.validate(None)?;
    if page_count == 0 {
        return Err(RenderError::InvalidSpec("page_count_target must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answer = match answer {
        Some(a) => a.to_string(),
        None => random_answer(kind, &mut rng),
    };
    let (needle_text, offset, question) = needle_and_question(kind, &answer);
    let total_lines = (page_count * config.lines_per_page) as usize;
    let filler_text = filler_lines(&mut rng, config.chars_per_line as usize, total_lines - 1);
    let spec = InstanceSpec {
        kind,
        filler_text,
        needle_text,
        answer,
        answer_offset: Some(offset),
        needle_depth,
        page_count_target: page_count,
        question,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// One single-character instance per sweep character, sharing filler,
/// depth and page count so only the answer glyph differs.
pub fn make_character_sweep(
    config: &RenderConfig,
    page_count: u32,
    seed: u64,
) -> Result<Vec<RenderedInstance>, RenderError> {
    sweep_characters()
        .into_iter()
        .map(|c| {
            let answer = c.to_string();
            let spec = generate_spec(
                InstanceKind::SingleChar,
                Some(&answer),
                SWEEP_DEPTH,
                page_count,
                seed,
                config,
            )?;
            render_instance(&spec, config)
        })
        .collect()
}
