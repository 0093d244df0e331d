// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plot data: CSV matrices plus plain SVG heatmaps and scatter plots.
//! Reads analysis outputs only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ocrhead_core::analysis::Coactivation;
use ocrhead_core::heads::all_heads;
use ocrhead_core::records::Record;
use ocrhead_core::scoring::{AggregateScores, ScoreKind};

use crate::stages::load_aggregates;
use crate::workspace::{load, Dataset};

const CELL: usize = 18;
const MARGIN: usize = 60;

fn kind_name(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Ocr => "ocr",
        ScoreKind::Retrieval => "retrieval",
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear white-to-blue ramp for `v` in `[0, 1]`.
fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 - 225.0 * v).round() as u8;
    let g = (255.0 - 180.0 * v).round() as u8;
    let b = (255.0 - 80.0 * v).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of `values` (rows x cols) scaled by `max`.
pub fn heatmap_svg(title: &str, values: &[Vec<f64>], rows: &[String], cols: &[String], max: f64) -> String {
    let n_cols = cols.len();
    let width = MARGIN + n_cols * CELL + 20;
    let height = MARGIN + values.len() * CELL + 20;
    let scale = if max > 0.0 { max } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="9">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="14" font-size="12">{}</text>"#, escape(title));
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN + j * CELL + CELL / 2,
            MARGIN - 6,
            escape(c)
        );
    }
    for (i, row) in values.iter().enumerate() {
        let y = MARGIN + i * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN - 4,
            y + CELL / 2 + 3,
            escape(&rows[i])
        );
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#dddddd"><title>{} {}: {:.6}</title></rect>"##,
                MARGIN + j * CELL,
                color(v / scale),
                escape(&rows[i]),
                escape(&cols[j]),
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of `(x, y)` points on the unit square.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64, String)]) -> String {
    let size = 320usize;
    let (w, h) = (size + MARGIN + 20, size + MARGIN + 30);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="14" font-size="12">{}</text>"#, escape(title));
    let (x0, y0) = (MARGIN, 30 + size);
    let _ = writeln!(
        s,
        r##"<rect x="{x0}" y="30" width="{size}" height="{size}" fill="none" stroke="#444444"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        x0 + size / 2,
        y0 + 24,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        30 + size / 2,
        30 + size / 2,
        escape(y_label)
    );
    for tick in 0..=4 {
        let f = tick as f64 / 4.0;
        let px = x0 as f64 + f * size as f64;
        let py = y0 as f64 - f * size as f64;
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{}" text-anchor="middle">{f:.2}</text>"#,
            y0 + 12
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{f:.2}</text>"#,
            x0 - 4,
            py + 3.0
        );
    }
    for (x, y, label) in points {
        let px = x0 as f64 + x.clamp(0.0, 1.0) * size as f64;
        let py = y0 as f64 - y.clamp(0.0, 1.0) * size as f64;
        let _ = writeln!(
            s,
            r##"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="#1f4fa0" fill-opacity="0.6"><title>{}: ({x:.6}, {y:.6})</title></circle>"##,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn heatmap_outputs(dir: &Path, agg: &AggregateScores) -> Result<Vec<PathBuf>> {
    let name = kind_name(agg.kind);
    let values: Vec<Vec<f64>> = (0..agg.num_layers)
        .map(|l| {
            (0..agg.num_heads)
                .map(|h| agg.mean(ocrhead_core::HeadId::new(l, h)))
                .collect()
        })
        .collect();
    let rows: Vec<String> = (0..agg.num_layers).map(|l| format!("L{l}")).collect();
    let cols: Vec<String> = (0..agg.num_heads).map(|h| format!("H{h}")).collect();
    let mut header = vec!["layer".to_string()];
    header.extend(cols.iter().cloned());
    let csv_rows: Vec<Vec<String>> = values
        .iter()
        .enumerate()
        .map(|(l, row)| {
            let mut r = vec![l.to_string()];
            r.extend(row.iter().map(|v| format!("{v:.6}")));
            r
        })
        .collect();
    let csv_path = dir.join(format!("{name}_heatmap.csv"));
    write_csv(&csv_path, &header, &csv_rows)?;
    let max = values.iter().flatten().copied().fold(0.0, f64::max);
    let svg_path = dir.join(format!("{name}_heatmap.svg"));
    std::fs::write(
        &svg_path,
        heatmap_svg(&format!("mean {name} score per head"), &values, &rows, &cols, max),
    )?;

    let points: Vec<(f64, f64, String)> = all_heads(agg.num_layers, agg.num_heads)
        .map(|h| (agg.activation_frequency(h), agg.mean(h), h.to_string()))
        .collect();
    let scatter_csv = dir.join(format!("{name}_frequency_vs_mean.csv"));
    write_csv(
        &scatter_csv,
        &[
            "head".into(),
            "layer".into(),
            "head_index".into(),
            "activation_frequency".into(),
            "mean".into(),
        ],
        &all_heads(agg.num_layers, agg.num_heads)
            .map(|h| {
                vec![
                    h.to_string(),
                    h.layer.to_string(),
                    h.head.to_string(),
                    format!("{:.6}", agg.activation_frequency(h)),
                    format!("{:.6}", agg.mean(h)),
                ]
            })
            .collect::<Vec<_>>(),
    )?;
    let scatter_svg_path = dir.join(format!("{name}_frequency_vs_mean.svg"));
    std::fs::write(
        &scatter_svg_path,
        scatter_svg(
            &format!("{name}: activation frequency vs mean score"),
            "activation frequency",
            "mean score",
            &points,
        ),
    )?;
    Ok(vec![csv_path, svg_path, scatter_csv, scatter_svg_path])
}

fn coactivation_outputs(dir: &Path, c: &Coactivation) -> Result<Vec<PathBuf>> {
    let mut header = vec!["character".to_string()];
    header.extend((1..=c.k).map(|r| format!("rank_{r}")));
    let rows: Vec<Vec<String>> = c
        .labels
        .iter()
        .zip(&c.lists)
        .map(|(l, heads)| {
            let mut r = vec![l.clone()];
            r.extend(heads.iter().map(|h| h.to_string()));
            r
        })
        .collect();
    let grid_csv = dir.join("char_topk.csv");
    write_csv(&grid_csv, &header, &rows)?;

    let mut header = vec!["character".to_string()];
    header.extend(c.labels.iter().cloned());
    let rows: Vec<Vec<String>> = c
        .labels
        .iter()
        .zip(&c.counts)
        .map(|(l, counts)| {
            let mut r = vec![l.clone()];
            r.extend(counts.iter().map(|n| n.to_string()));
            r
        })
        .collect();
    let matrix_csv = dir.join("char_coactivation.csv");
    write_csv(&matrix_csv, &header, &rows)?;
    let values: Vec<Vec<f64>> = c.counts.iter().map(|r| r.iter().map(|&n| n as f64).collect()).collect();
    let svg = dir.join("char_coactivation.svg");
    std::fs::write(
        &svg,
        heatmap_svg(
            &format!("shared top-{} OCR heads between characters", c.k),
            &values,
            &c.labels,
            &c.labels,
            c.k as f64,
        ),
    )?;
    Ok(vec![grid_csv, matrix_csv, svg])
}

/// Writes every plot for the dataset; returns the files written.
pub fn plot(ds: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = ds.plots_dir();
    std::fs::create_dir_all(&dir)?;
    let (ocr, ret) = load_aggregates(ds)?;
    let mut written = heatmap_outputs(&dir, &ocr)?;
    written.extend(heatmap_outputs(&dir, &ret)?);
    if ds.compare().exists() {
        for r in load(&ds.compare())? {
            if let Record::Coactivation(c) = r {
                written.extend(coactivation_outputs(&dir, &c)?);
            }
        }
    }
    Ok(written)
}
