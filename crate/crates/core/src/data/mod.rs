//! Series ingestion: windowing, min-max normalisation, controlled
//! missingness, splits, and the synthetic sine fixture used by desk-scale
//! tests.

mod csv;
pub(crate) mod container;

pub use container::{read_series, write_series, ContainerMeta};
pub use csv::{load_csv, RawTable};

use crate::error::{Error, Result};
use crate::rng::Prng;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A batch of fixed-length multivariate windows.
///
/// `values` is [batch, len, dim], `times` [batch, len] with per-window stamps
/// normalised to [0,1], `mask` true where an observation is present. When
/// `regular` is set the stamps are the uniform grid k/(len-1).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBatch {
    pub values: Array3<f64>,
    pub times: Array2<f64>,
    pub mask: Array2<bool>,
    pub regular: bool,
}

impl SeriesBatch {
    pub fn n_samples(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// Uniform time grid on [0,1].
    pub fn uniform_times(n_samples: usize, len: usize) -> Array2<f64> {
        Array2::from_shape_fn((n_samples, len), |(_, k)| {
            if len == 1 {
                0.0
            } else {
                k as f64 / (len - 1) as f64
            }
        })
    }

    /// A fully observed regular batch over the uniform grid.
    pub fn regular_from_values(values: Array3<f64>) -> Self {
        let (b, n, _) = values.dim();
        SeriesBatch {
            times: Self::uniform_times(b, n),
            mask: Array2::from_elem((b, n), true),
            values,
            regular: true,
        }
    }

    /// Row-subset of the batch.
    pub fn select(&self, idx: &[usize]) -> SeriesBatch {
        let (_, n, d) = self.values.dim();
        let mut values = Array3::zeros((idx.len(), n, d));
        let mut times = Array2::zeros((idx.len(), n));
        let mut mask = Array2::from_elem((idx.len(), n), true);
        for (row, &i) in idx.iter().enumerate() {
            values
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.values.index_axis(ndarray::Axis(0), i));
            times
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.times.index_axis(ndarray::Axis(0), i));
            for k in 0..n {
                mask[[row, k]] = self.mask[[i, k]];
            }
        }
        SeriesBatch { values, times, mask, regular: self.regular }
    }

    /// Observed count of the given sample.
    pub fn observed_count(&self, sample: usize) -> usize {
        (0..self.len()).filter(|&k| self.mask[[sample, k]]).count()
    }
}

/// Per-feature min/max computed from the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Sliding windows over a raw table. Stamp grid is uniform per window.
pub fn window(table: &RawTable, length: usize, stride: usize) -> Result<SeriesBatch> {
    if length < 2 {
        return Err(Error::Data(format!("window length must be >= 2, got {length}")));
    }
    if stride == 0 {
        return Err(Error::Data("stride must be >= 1".into()));
    }
    let rows = table.rows.len();
    if rows < length {
        return Err(Error::Data(format!(
            "table has {rows} rows, fewer than window length {length}"
        )));
    }
    let dim = table.columns.len();
    let count = (rows - length) / stride + 1;
    let mut values = Array3::zeros((count, length, dim));
    for w in 0..count {
        for j in 0..length {
            for d in 0..dim {
                values[[w, j, d]] = table.rows[w * stride + j][d];
            }
        }
    }
    Ok(SeriesBatch::regular_from_values(values))
}

/// Fit per-feature min/max over observed entries.
pub fn minmax_fit(batch: &SeriesBatch) -> Result<NormStats> {
    let d = batch.dim();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for b in 0..batch.n_samples() {
        for k in 0..batch.len() {
            if !batch.mask[[b, k]] {
                continue;
            }
            for j in 0..d {
                let v = batch.values[[b, k, j]];
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
    }
    if min.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot fit stats: no observed entries".into()));
    }
    for j in 0..d {
        if max[j] == min[j] {
            log::warn!("feature {j} has zero range; it will normalise to the constant 0.5");
        }
    }
    Ok(NormStats { min, max })
}

/// Map features into [0,1] using training-split stats. Out-of-range values
/// clip; zero-range features map to 0.5.
pub fn normalize(batch: &SeriesBatch, stats: &NormStats) -> Result<SeriesBatch> {
    if stats.min.len() != batch.dim() {
        return Err(Error::Shape(format!(
            "stats dim {} vs batch dim {}",
            stats.min.len(),
            batch.dim()
        )));
    }
    let mut out = batch.clone();
    for b in 0..batch.n_samples() {
        for k in 0..batch.len() {
            for j in 0..batch.dim() {
                let range = stats.max[j] - stats.min[j];
                out.values[[b, k, j]] = if range == 0.0 {
                    0.5
                } else {
                    ((batch.values[[b, k, j]] - stats.min[j]) / range).clamp(0.0, 1.0)
                };
            }
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`] for in-range values.
pub fn denormalize(batch: &SeriesBatch, stats: &NormStats) -> Result<SeriesBatch> {
    if stats.min.len() != batch.dim() {
        return Err(Error::Shape(format!(
            "stats dim {} vs batch dim {}",
            stats.min.len(),
            batch.dim()
        )));
    }
    let mut out = batch.clone();
    for b in 0..batch.n_samples() {
        for k in 0..batch.len() {
            for j in 0..batch.dim() {
                let range = stats.max[j] - stats.min[j];
                out.values[[b, k, j]] = batch.values[[b, k, j]] * range + stats.min[j];
            }
        }
    }
    Ok(out)
}

/// Drop exactly `round(rate * len)` observations per sample, chosen uniformly
/// and never including the first order. Values are left untouched; only the
/// mask (and the `regular` flag) change.
pub fn inject_missing(batch: &SeriesBatch, rate: f64, rng: &mut Prng) -> Result<SeriesBatch> {
    if !(0.0..=0.9).contains(&rate) {
        return Err(Error::Domain(format!("missing rate {rate} outside [0, 0.9]")));
    }
    if !batch.regular {
        return Err(Error::Data("inject_missing expects a regular batch".into()));
    }
    let n = batch.len();
    let drop = (rate * n as f64).round() as usize;
    if drop >= n {
        return Err(Error::Domain(format!(
            "rate {rate} would drop all {n} observations"
        )));
    }
    if drop == 0 {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    out.regular = false;
    let candidates: Vec<usize> = (1..n).collect();
    for b in 0..batch.n_samples() {
        let mut pool = candidates.clone();
        pool.shuffle(rng);
        for &k in pool.iter().take(drop) {
            out.mask[[b, k]] = false;
        }
    }
    Ok(out)
}

/// Disjoint train/valid/test split, reproducible under the seed.
pub fn split(
    batch: &SeriesBatch,
    ratios: (f64, f64, f64),
    rng: &mut Prng,
) -> Result<(SeriesBatch, SeriesBatch, SeriesBatch)> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, need 1")));
    }
    let n = batch.n_samples();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = (ratios.0 * n as f64).round() as usize;
    let n_valid = (ratios.1 * n as f64).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::Data(format!(
            "split of {n} samples with ratios {ratios:?} leaves an empty part"
        )));
    }
    let train = batch.select(&idx[..n_train]);
    let valid = batch.select(&idx[n_train..n_train + n_valid]);
    let test = batch.select(&idx[n_train + n_valid..]);
    Ok((train, valid, test))
}

/// Random subset of at most `cap` windows (identity when already smaller).
pub fn subsample(batch: &SeriesBatch, cap: usize, rng: &mut Prng) -> SeriesBatch {
    if batch.n_samples() <= cap {
        return batch.clone();
    }
    let idx = rand::seq::index::sample(rng, batch.n_samples(), cap).into_vec();
    batch.select(&idx)
}

/// Synthetic sine fixture: each channel is sin(2π f t + φ) with f ~ U(1,5),
/// φ ~ U(0, 2π), rescaled into [0,1].
pub fn synth_sines(n_samples: usize, dim: usize, length: usize, rng: &mut Prng) -> SeriesBatch {
    let mut values = Array3::zeros((n_samples, length, dim));
    for b in 0..n_samples {
        for j in 0..dim {
            let f: f64 = rng.random_range(1.0..5.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            for k in 0..length {
                let t = k as f64 / (length - 1) as f64;
                values[[b, k, j]] = ((std::f64::consts::TAU * f * t + phase).sin() + 1.0) / 2.0;
            }
        }
    }
    SeriesBatch::regular_from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn table(rows: usize, dim: usize) -> RawTable {
        RawTable {
            columns: (0..dim).map(|j| format!("f{j}")).collect(),
            rows: (0..rows)
                .map(|i| (0..dim).map(|j| (i * dim + j) as f64).collect())
                .collect(),
        }
    }

    #[test]
    fn window_counts() {
        let batch = window(&table(25, 2), 24, 1).unwrap();
        assert_eq!(batch.n_samples(), 2);
        // the raw stock table has 3708 data rows; length-24 windows give the
        // published 3685 sample count
        let batch = window(&table(3708, 6), 24, 1).unwrap();
        assert_eq!(batch.n_samples(), 3685);
        // 10000 rows (ai4i row count) windows to 9977, not 10000
        let batch = window(&table(10_000, 5), 24, 1).unwrap();
        assert_eq!(batch.n_samples(), 9977);
        assert!(window(&table(10, 2), 24, 1).is_err());
    }

    #[test]
    fn window_preserves_row_order() {
        let t = table(30, 3);
        let batch = window(&t, 24, 2).unwrap();
        for w in 0..batch.n_samples() {
            for j in 0..24 {
                for d in 0..3 {
                    assert_eq!(batch.values[[w, j, d]], t.rows[w * 2 + j][d]);
                }
            }
        }
    }

    #[test]
    fn normalize_basics() {
        let mut values = Array3::zeros((1, 3, 2));
        // feature 0: range [2,4]; feature 1: constant 7
        for (k, v) in [2.0, 3.0, 4.0].iter().enumerate() {
            values[[0, k, 0]] = *v;
            values[[0, k, 1]] = 7.0;
        }
        let batch = SeriesBatch::regular_from_values(values);
        let stats = minmax_fit(&batch).unwrap();
        let norm = normalize(&batch, &stats).unwrap();
        assert!((norm.values[[0, 1, 0]] - 0.5).abs() < 1e-12);
        assert!((norm.values[[0, 0, 1]] - 0.5).abs() < 1e-12);
        let back = denormalize(&norm, &stats).unwrap();
        for k in 0..3 {
            assert!((back.values[[0, k, 0]] - batch.values[[0, k, 0]]).abs() < 1e-9);
            assert!((back.values[[0, k, 1]] - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_round_trip_random() {
        let mut rng = substream(5, "norm");
        let values = Array3::from_shape_fn((4, 6, 3), |_| rng.random_range(-3.0..9.0));
        let batch = SeriesBatch::regular_from_values(values);
        let stats = minmax_fit(&batch).unwrap();
        let norm = normalize(&batch, &stats).unwrap();
        assert!(norm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize(&norm, &stats).unwrap();
        let max_err = back
            .values
            .iter()
            .zip(batch.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "round trip error {max_err}");
    }

    #[test]
    fn inject_missing_counts_and_values() {
        let mut rng = substream(6, "miss");
        let batch = synth_sines(8, 2, 24, &mut rng);
        let out = inject_missing(&batch, 0.0, &mut rng).unwrap();
        assert_eq!(out, batch);

        let out = inject_missing(&batch, 0.5, &mut rng).unwrap();
        assert!(!out.regular);
        for b in 0..8 {
            assert_eq!(out.observed_count(b), 12);
            assert!(out.mask[[b, 0]], "first order must stay observed");
        }
        // values bit-identical
        assert_eq!(out.values, batch.values);
        assert_eq!(out.times, batch.times);

        let out = inject_missing(&batch, 0.7, &mut rng).unwrap();
        for b in 0..8 {
            assert_eq!(out.observed_count(b), 7);
        }
        assert!(inject_missing(&batch, 0.95, &mut rng).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut rng = substream(7, "split");
        let batch = synth_sines(100, 1, 8, &mut rng);
        let (tr, va, te) =
            split(&batch, (0.8, 0.1, 0.1), &mut substream(1, "s")).unwrap();
        assert_eq!((tr.n_samples(), va.n_samples(), te.n_samples()), (80, 10, 10));

        let (tr2, ..) = split(&batch, (0.8, 0.1, 0.1), &mut substream(1, "s")).unwrap();
        assert_eq!(tr.values, tr2.values);

        let (tr3, ..) = split(&batch, (0.8, 0.1, 0.1), &mut substream(2, "s")).unwrap();
        assert_ne!(tr.values, tr3.values);
    }

    #[test]
    fn sines_are_bounded_smooth_and_seeded() {
        let mut rng = substream(8, "sine");
        let batch = synth_sines(64, 2, 24, &mut rng);
        assert!(batch.values.iter().all(|v| (0.0..=1.0).contains(v)));

        // average lag-1 autocorrelation per channel
        for j in 0..2 {
            let mut acc = 0.0;
            for b in 0..64 {
                let xs: Vec<f64> = (0..24).map(|k| batch.values[[b, k, j]]).collect();
                let mean = xs.iter().sum::<f64>() / 24.0;
                let var: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum();
                let cov: f64 = (1..24).map(|k| (xs[k] - mean) * (xs[k - 1] - mean)).sum();
                acc += cov / var.max(1e-12);
            }
            assert!(acc / 64.0 > 0.5, "channel {j} lag-1 autocorr {}", acc / 64.0);
        }

        let b1 = synth_sines(4, 2, 10, &mut substream(9, "x"));
        let b2 = synth_sines(4, 2, 10, &mut substream(9, "x"));
        assert_eq!(b1, b2);
    }
}
