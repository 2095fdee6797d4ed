//! Exact t-SNE embedding of flattened windows, for the real-vs-synthetic
//! overlap plots. Desk-scale sample counts keep the O(n²) variant fast.

use super::plot;
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::Arr;
use crate::rng::{randn, substream};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    pub learning_rate: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 30.0, n_iter: 500, learning_rate: 200.0 }
    }
}

#[derive(Debug, Clone)]
pub struct TsneArtifact {
    pub png_path: PathBuf,
    pub coords_path: PathBuf,
    pub n_rows: usize,
}

/// Row-wise flattening of a window batch.
fn flatten(batch: &SeriesBatch) -> Arr {
    let (b, n, d) = batch.values.dim();
    let mut out = Arr::zeros((b, n * d));
    for i in 0..b {
        for k in 0..n {
            for j in 0..d {
                out[[i, k * d + j]] = batch.values[[i, k, j]];
            }
        }
    }
    out
}

/// Conditional Gaussian affinities with per-point bandwidth found by binary
/// search on the perplexity.
fn affinities(x: &Arr, perplexity: f64) -> Arr {
    let n = x.nrows();
    let mut d2 = Arr::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..x.ncols() {
                let d = x[[i, k]] - x[[j, k]];
                acc += d * d;
            }
            d2[[i, j]] = acc;
            d2[[j, i]] = acc;
        }
    }
    let target = perplexity.ln();
    let mut p = Arr::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi) = (1e-20f64, 1e20f64);
        let mut beta = 1.0;
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = (-beta * d2[[i, j]]).exp();
                sum += w;
                weighted += w * d2[[i, j]];
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * weighted / sum;
            if entropy > target {
                lo = beta;
                beta = if hi >= 1e20 { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = if lo <= 1e-20 { beta / 2.0 } else { (beta + lo) / 2.0 };
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                p[[i, j]] = (-beta * d2[[i, j]]).exp();
                sum += p[[i, j]];
            }
        }
        let sum = sum.max(1e-300);
        for j in 0..n {
            p[[i, j]] /= sum;
        }
    }
    // symmetrize and normalize
    let mut sym = Arr::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sym[[i, j]] = (p[[i, j]] + p[[j, i]]) / (2.0 * n as f64);
        }
    }
    sym
}

/// Exact t-SNE with early exaggeration and momentum. Deterministic under the
/// seed.
pub fn tsne_embed(x: &Arr, cfg: &TsneConfig, seed: u64) -> Result<Arr> {
    let n = x.nrows();
    let min_n = (3.0 * cfg.perplexity) as usize + 1;
    if n < min_n {
        return Err(Error::Data(format!(
            "t-SNE needs at least {min_n} samples for perplexity {}, got {n}",
            cfg.perplexity
        )));
    }
    let p = affinities(x, cfg.perplexity);
    let mut rng = substream(seed, "tsne-init");
    let mut y = randn(&mut rng, n, 2) * 1e-4;
    let mut velocity = Arr::zeros((n, 2));
    let mut gains = Arr::from_elem((n, 2), 1.0);

    for iter in 0..cfg.n_iter {
        let exaggeration = if iter < 100 { 12.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };

        // student-t affinities in the embedding
        let mut num = Arr::zeros((n, n));
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = q;
                num[[j, i]] = q;
                z += 2.0 * q;
            }
        }
        let z = z.max(1e-300);

        let mut grad = Arr::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[[i, j]] / z;
                let mult = (exaggeration * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += 4.0 * mult * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += 4.0 * mult * (y[[i, 1]] - y[[j, 1]]);
            }
        }

        for i in 0..n {
            for k in 0..2 {
                let same_sign = grad[[i, k]].signum() == velocity[[i, k]].signum();
                gains[[i, k]] = if same_sign {
                    (gains[[i, k]] * 0.8).max(0.01)
                } else {
                    gains[[i, k]] + 0.2
                };
                velocity[[i, k]] = momentum * velocity[[i, k]]
                    - cfg.learning_rate * gains[[i, k]] * grad[[i, k]];
                y[[i, k]] += velocity[[i, k]];
            }
        }
        // re-center
        for k in 0..2 {
            let mean = y.column(k).mean().unwrap();
            for i in 0..n {
                y[[i, k]] -= mean;
            }
        }
    }
    Ok(y)
}

/// Embed both sets together, color by origin, and write the image plus the
/// coordinate table (`set  x  y`, one row per window).
pub fn tsne_plot(
    real: &SeriesBatch,
    synth: &SeriesBatch,
    out_base: &Path,
    seed: u64,
    cfg: &TsneConfig,
) -> Result<TsneArtifact> {
    if real.dim() != synth.dim() || real.len() != synth.len() {
        return Err(Error::Shape(
            "t-SNE expects windows of identical shape in both sets".into(),
        ));
    }
    let xr = flatten(real);
    let xs = flatten(synth);
    let n_real = xr.nrows();
    let n = n_real + xs.nrows();
    let mut x = Arr::zeros((n, xr.ncols()));
    for i in 0..n_real {
        x.row_mut(i).assign(&xr.row(i));
    }
    for i in 0..xs.nrows() {
        x.row_mut(n_real + i).assign(&xs.row(i));
    }
    let y = tsne_embed(&x, cfg, seed)?;

    let png_path = out_base.with_extension("png");
    let coords_path = out_base.with_extension("tsv");
    if let Some(dir) = out_base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&coords_path).map_err(|e| Error::io(&coords_path, e))?,
    );
    writeln!(f, "set\tx\ty").map_err(|e| Error::io(&coords_path, e))?;
    let mut real_pts = Vec::with_capacity(n_real);
    let mut synth_pts = Vec::with_capacity(n - n_real);
    for i in 0..n {
        let tag = if i < n_real { "real" } else { "synthetic" };
        writeln!(f, "{tag}\t{}\t{}", y[[i, 0]], y[[i, 1]])
            .map_err(|e| Error::io(&coords_path, e))?;
        if i < n_real {
            real_pts.push((y[[i, 0]], y[[i, 1]]));
        } else {
            synth_pts.push((y[[i, 0]], y[[i, 1]]));
        }
    }
    plot::scatter(
        &png_path,
        480,
        480,
        &[(plot::RED, real_pts), (plot::BLUE, synth_pts)],
    )?;
    Ok(TsneArtifact { png_path, coords_path, n_rows: n })
}
