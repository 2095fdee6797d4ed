//! Per-feature kernel density estimates of pooled series values (stamps
//! ignored), written as an overlay image plus the numeric grid.

use super::plot;
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const GRID_POINTS: usize = 512;

#[derive(Debug, Clone)]
pub struct KdeArtifact {
    pub png_path: PathBuf,
    pub grid_path: PathBuf,
    /// Total-variation distance between the two estimated densities, per
    /// feature.
    pub tv_per_feature: Vec<f64>,
}

/// Pooled observed values of one feature.
fn pooled(batch: &SeriesBatch, feature: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..batch.n_samples() {
        for k in 0..batch.len() {
            if batch.mask[[b, k]] {
                out.push(batch.values[[b, k, feature]]);
            }
        }
    }
    out
}

/// Scott's rule bandwidth. `floor` keeps kernels wider than the evaluation
/// grid spacing so near-constant data still tabulates to unit mass.
fn bandwidth(values: &[f64], floor: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let h = sigma * n.powf(-0.2);
    h.max(floor)
}

/// Gaussian KDE evaluated on a shared grid.
pub fn kde_on_grid(values: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| (-((x - v) / h).powi(2) / 2.0).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Total-variation distance between two densities tabulated on one grid,
/// by trapezoidal quadrature of |p - q| / 2.
pub fn tv_distance(grid: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        let dx = grid[i] - grid[i - 1];
        let a = (p[i - 1] - q[i - 1]).abs();
        let b = (p[i] - q[i]).abs();
        acc += 0.5 * (a + b) * dx;
    }
    acc / 2.0
}

/// Trapezoidal integral of a tabulated density.
pub fn grid_integral(grid: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..grid.len() {
        acc += 0.5 * (p[i - 1] + p[i]) * (grid[i] - grid[i - 1]);
    }
    acc
}

/// Estimate and overlay both densities per feature. Writes `<base>.png` and
/// `<base>.tsv` (columns: feature, x, real, synthetic).
pub fn kde_plot(real: &SeriesBatch, synth: &SeriesBatch, out_base: &Path) -> Result<KdeArtifact> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("kde needs non-empty inputs".into()));
    }
    if real.dim() != synth.dim() {
        return Err(Error::Shape(format!(
            "feature mismatch: real dim {} vs synthetic dim {}",
            real.dim(),
            synth.dim()
        )));
    }
    let png_path = out_base.with_extension("png");
    let grid_path = out_base.with_extension("tsv");
    if let Some(dir) = out_base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut grid_file = std::io::BufWriter::new(
        std::fs::File::create(&grid_path).map_err(|e| Error::io(&grid_path, e))?,
    );
    writeln!(grid_file, "feature\tx\treal\tsynthetic").map_err(|e| Error::io(&grid_path, e))?;

    let mut tv_per_feature = Vec::with_capacity(real.dim());
    let mut series = Vec::new();
    for j in 0..real.dim() {
        let rv = pooled(real, j);
        let sv = pooled(synth, j);
        let span = {
            let lo = rv.iter().chain(sv.iter()).fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = rv.iter().chain(sv.iter()).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            hi - lo
        };
        let floor = (span / 256.0).max(1e-9);
        let h_r = bandwidth(&rv, floor);
        let h_s = bandwidth(&sv, floor);
        let h_max = h_r.max(h_s);
        // 5-sigma margins keep each curve's grid mass within 1e-3 of 1
        let lo = rv
            .iter()
            .chain(sv.iter())
            .fold(f64::INFINITY, |a, &b| a.min(b))
            - 5.0 * h_max;
        let hi = rv
            .iter()
            .chain(sv.iter())
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            + 5.0 * h_max;
        let grid: Vec<f64> = (0..GRID_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
            .collect();
        let dr = kde_on_grid(&rv, &grid, h_r);
        let ds = kde_on_grid(&sv, &grid, h_s);
        for i in 0..grid.len() {
            writeln!(grid_file, "{j}\t{}\t{}\t{}", grid[i], dr[i], ds[i])
                .map_err(|e| Error::io(&grid_path, e))?;
        }
        tv_per_feature.push(tv_distance(&grid, &dr, &ds));

        // offset each feature's curves vertically into its own band
        let peak = dr.iter().chain(ds.iter()).fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
        let offset = j as f64 * 1.2;
        let to_pts = |d: &[f64]| -> Vec<(f64, f64)> {
            (0..GRID_POINTS)
                .map(|i| {
                    let frac = i as f64 / (GRID_POINTS - 1) as f64;
                    (frac, offset + d[i] / peak)
                })
                .collect()
        };
        series.push((plot::RED, to_pts(&dr)));
        series.push((plot::BLUE, to_pts(&ds)));
    }
    plot::line_chart(&png_path, 640, 160 * real.dim() as u32 + 40, &series)?;
    Ok(KdeArtifact { png_path, grid_path, tv_per_feature })
}
