//! Numeric tables as CSV, line plots rendered from those files, and image grids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{ArrayD, Ix5};
use obe_core::datasets::denormalize_pixel;

use crate::error::{CliError, Result};

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok((header, rows))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// SVG line plot of every column against the first one.
pub fn line_plot_svg(header: &[String], rows: &[Vec<f64>], title: &str) -> String {
    let (w, h, margin) = (640.0, 400.0, 48.0);
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let ys = rows.iter().flat_map(|r| r[1..].iter().copied());
    let (x0, x1) = bounds(xs.iter().copied());
    let (y0, y1) = bounds(ys);
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin
    );
    let _ = writeln!(svg, r#"<text x="{margin}" y="{}" font-size="10">{x0:.3}</text>"#, h - margin + 14.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#, w - margin, h - margin + 14.0);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="10">{y0:.3}</text>"#, h - margin);
    let _ = writeln!(svg, r#"<text x="4" y="{}" font-size="10">{y1:.3}</text>"#, margin + 4.0);
    for (j, name) in header.iter().enumerate().skip(1) {
        let color = PALETTE[(j - 1) % PALETTE.len()];
        let points: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", sx(r[0]), sy(r[j]))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            w - margin + 4.0,
            margin + 12.0 * j as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the plot for a CSV table, reading the numbers back from the file.
pub fn plot_csv(csv_path: &Path, svg_path: &Path, title: &str) -> Result<()> {
    let (header, rows) = read_csv(csv_path)?;
    fs::write(svg_path, line_plot_svg(&header, &rows, title))?;
    Ok(())
}

/// Tiles `[rows, cols, C, n, n]` images in `[-1, 1]` into one PNG of `cols * n` by `rows * n` pixels.
pub fn write_grid_png(images: &ArrayD<f64>, path: &Path) -> Result<()> {
    let grid = images
        .view()
        .into_dimensionality::<Ix5>()
        .map_err(|e| CliError::runtime(format!("image grid: {e}")))?;
    let (rows, cols, ch, n, _) = grid.dim();
    let (w, h) = ((cols * n) as u32, (rows * n) as u32);
    let px = |r: usize, c: usize, k: usize, y: usize, x: usize| denormalize_pixel(grid[[r, c, k, y, x]].clamp(-1.0, 1.0));
    let at = |x: u32, y: u32| {
        let (x, y) = (x as usize, y as usize);
        (y / n, x / n, y % n, x % n)
    };
    let saved = match ch {
        1 => GrayImage::from_fn(w, h, |x, y| {
            let (r, c, yy, xx) = at(x, y);
            image::Luma([px(r, c, 0, yy, xx)])
        })
        .save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            let (r, c, yy, xx) = at(x, y);
            image::Rgb([px(r, c, 0, yy, xx), px(r, c, 1, yy, xx), px(r, c, 2, yy, xx)])
        })
        .save(path),
        other => return Err(CliError::runtime(format!("cannot write {other}-channel images"))),
    };
    saved.map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
