use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{contract, Result};

/// Colours for the first clusters; later ids cycle through hues by the golden angle.
pub const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

const SIZE: f64 = 480.0;
const MARGIN: f64 = 16.0;
const UNLABELED: &str = "#333333";

fn colour(label: usize) -> String {
    match PALETTE.get(label) {
        Some(c) => (*c).to_string(),
        None => format!("hsl({:.1},65%,45%)", (label as f64 * 137.507_764) % 360.0),
    }
}

/// Converts rows to 2D points, rejecting any row that is not two-dimensional.
pub fn points_from_rows(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| match r.as_slice() {
            &[x, y] => Ok([x, y]),
            _ => Err(contract(format!("plot needs 2D points, row {i} has {} coordinates", r.len()))),
        })
        .collect()
}

/// A square scatter plot, one circle per point, coloured by label.
pub fn render_svg(points: &[[f64; 2]], labels: Option<&[usize]>) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != points.len() {
            return Err(contract(format!("{} labels for {} points", l.len(), points.len())));
        }
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(contract("plot coordinates must be finite"));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (0..2).map(|d| hi[d] - lo[d]).fold(0.0, f64::max).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in points.iter().enumerate() {
        let x = MARGIN + (p[0] - lo[0]) * scale;
        let y = SIZE - MARGIN - (p[1] - lo[1]) * scale;
        let fill = labels.map_or_else(|| UNLABELED.to_string(), |l| colour(l[i]));
        let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{fill}"/>"#);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes [`render_svg`] output to `path`.
pub fn emit_plot(points: &[[f64; 2]], labels: Option<&[usize]>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_svg(points, labels)?)?;
    Ok(())
}
