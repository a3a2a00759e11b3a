//! Latent traversal grids and correlation curves from a checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};
use obe_core::metrics::{correlation_curves, sweep_grid, CurveSet, ImageGenerator};
use obe_core::networks::sample_latent;
use obe_core::obe::BasisMode;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{CliError, Result};
use crate::plot::{plot_csv, write_csv, write_grid_png};
use crate::run::RunDir;

/// Images `[rows, steps, C, n, n]`: row `r` holds one draw of `(z, c)`, column `s` sets `c[dim]` to the `s`-th sweep value.
pub fn traversal(generator: &dyn ImageGenerator, dim: usize, steps: usize, rows: usize, seed: u64) -> Result<ArrayD<f64>> {
    let (d, k) = (generator.noise_dim(), generator.code_dim());
    if dim >= k {
        return Err(CliError::config(format!("dims: code dimension {dim} out of range (k = {k})")));
    }
    if steps == 0 || rows == 0 {
        return Err(CliError::config("steps / rows: must be positive"));
    }
    let base = sample_latent(rows, d, k, seed)?;
    let sweep = sweep_grid(steps);
    let mut z = Array2::zeros((rows * steps, d));
    let mut c = Array2::zeros((rows * steps, k));
    for r in 0..rows {
        for (j, &v) in sweep.iter().enumerate() {
            let i = r * steps + j;
            z.row_mut(i).assign(&base.z.row(r));
            c.row_mut(i).assign(&base.c.row(r));
            c[[i, dim]] = v;
        }
    }
    let images = generator.render(&z, &c)?;
    let shape = images.shape();
    let mut full = vec![rows, steps];
    full.extend_from_slice(&shape[1..]);
    images
        .into_shape_with_order(IxDyn(&full))
        .map_err(|e| CliError::runtime(format!("traversal reshape: {e}")))
}

/// Mean column of the lit pixels in each image of a `[rows, steps, C, n, n]` grid.
pub fn centroid_columns(grid: &ArrayD<f64>) -> Array2<f64> {
    let (rows, steps) = (grid.shape()[0], grid.shape()[1]);
    Array2::from_shape_fn((rows, steps), |(r, s)| {
        let img = grid.slice(s![r, s, .., .., ..]);
        let (mut sum, mut mass) = (0.0, 0.0);
        for ((_, _, x), &v) in img.indexed_iter() {
            let w = (v + 1.0) / 2.0;
            sum += w * x as f64;
            mass += w;
        }
        if mass > 0.0 {
            sum / mass
        } else {
            f64::NAN
        }
    })
}

pub struct TraverseOutcome {
    pub grids: Vec<(usize, ArrayD<f64>, PathBuf)>,
}

pub fn traverse_run(checkpoint_path: &Path, dims: Option<&[usize]>, steps: usize, rows: usize, seed: u64, out: Option<&Path>) -> Result<TraverseOutcome> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| RunDir::of_checkpoint(checkpoint_path).figures());
    fs::create_dir_all(&dir)?;
    let k = ckpt.state.generator.spec.code_dim;
    let dims: Vec<usize> = dims.map(<[usize]>::to_vec).unwrap_or_else(|| (0..k).collect());
    let mut grids = Vec::new();
    for dim in dims {
        let grid = traversal(&ckpt.state.generator, dim, steps, rows, seed)?;
        let path = dir.join(format!("traverse_dim{dim}.png"));
        write_grid_png(&grid, &path)?;
        grids.push((dim, grid, path));
    }
    Ok(TraverseOutcome { grids })
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveSummary {
    pub dim: usize,
    pub basis: BasisMode,
    pub variation: Vec<f64>,
    pub matched: f64,
    pub max_unmatched: f64,
    pub selectivity: Option<f64>,
    pub table: String,
    pub plot: String,
}

pub struct CurvesOutcome {
    pub sets: Vec<CurveSet>,
    pub summaries: Vec<CurveSummary>,
    pub dir: PathBuf,
}

/// Curve tables (`sweep` plus one column per selected coefficient) and plots rendered from them.
pub fn curves_run(checkpoint_path: &Path, dims: Option<&[usize]>, steps: usize, seed: u64, out: Option<&Path>) -> Result<CurvesOutcome> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let obe = ckpt
        .state
        .obe
        .as_ref()
        .ok_or_else(|| CliError::config("checkpoint: the model has no OBE module, so there are no coefficients to trace"))?;
    let run = RunDir::of_checkpoint(checkpoint_path);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run.figures());
    fs::create_dir_all(&dir)?;
    let k = obe.code_dim();
    let dims: Vec<usize> = dims.map(<[usize]>::to_vec).unwrap_or_else(|| (0..k).collect());

    let mut header = vec!["sweep".to_string()];
    header.extend(obe.assignment.positions.iter().enumerate().map(|(j, (u, v))| format!("c{j}_at_{u}_{v}")));
    let mut sets = Vec::new();
    let mut summaries = Vec::new();
    for dim in dims {
        let set = correlation_curves(&ckpt.state.generator, obe, dim, steps, seed)?;
        let rows: Vec<Vec<f64>> = set
            .values
            .axis_iter(Axis(0))
            .zip(&set.sweep)
            .map(|(row, &x)| std::iter::once(x).chain(row.iter().copied()).collect())
            .collect();
        let table = dir.join(format!("curves_dim{dim}.csv"));
        let plot = dir.join(format!("curves_dim{dim}.svg"));
        write_csv(&table, &header, &rows)?;
        plot_csv(&table, &plot, &format!("code {dim} swept over [-1, 1] ({:?} basis)", obe.mode))?;
        let others = Array1::from_iter((0..k).filter(|&j| j != dim).map(|j| set.variation[j]));
        summaries.push(CurveSummary {
            dim,
            basis: obe.mode,
            variation: set.variation.clone(),
            matched: set.variation[dim],
            max_unmatched: others.iter().copied().fold(0.0, f64::max),
            selectivity: set.selectivity,
            table: table.display().to_string(),
            plot: plot.display().to_string(),
        });
        sets.push(set);
    }
    let reports = if out.is_some() { dir.clone() } else { run.reports() };
    fs::create_dir_all(&reports)?;
    fs::write(reports.join("curves.json"), serde_json::to_string_pretty(&summaries)?)?;
    fs::write(reports.join("curves.md"), render_selectivity(&summaries))?;
    Ok(CurvesOutcome { sets, summaries, dir })
}

/// Markdown table: one row per swept dimension.
pub fn render_selectivity(summaries: &[CurveSummary]) -> String {
    let mut out = String::from("| dim | basis | matched TV | max unmatched TV | selectivity |\n|---|---|---|---|---|\n");
    for s in summaries {
        let sel = s.selectivity.map_or("inf".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "| {} | {:?} | {:.6} | {:.6} | {sel} |\n",
            s.dim, s.basis, s.matched, s.max_unmatched
        ));
    }
    out
}
