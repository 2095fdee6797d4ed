//! Natural cubic spline control paths through the observed points of a
//! series, with time appended as an extra channel so the path is strictly
//! increasing in at least one coordinate.

use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::Arr;

/// One natural cubic spline: knots, values, and second derivatives.
#[derive(Debug, Clone)]
struct Spline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    y2: Vec<f64>,
}

impl Spline {
    /// Natural boundary conditions: zero second derivative at both ends.
    fn fit(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        let mut y2 = vec![0.0; n];
        let mut u = vec![0.0; n];
        for i in 1..n - 1 {
            let sig = (xs[i] - xs[i - 1]) / (xs[i + 1] - xs[i - 1]);
            let p = sig * y2[i - 1] + 2.0;
            y2[i] = (sig - 1.0) / p;
            u[i] = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
                - (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
            u[i] = (6.0 * u[i] / (xs[i + 1] - xs[i - 1]) - sig * u[i - 1]) / p;
        }
        for k in (0..n - 1).rev() {
            y2[k] = y2[k] * y2[k + 1] + u[k];
        }
        Spline { xs, ys, y2 }
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.xs.len();
        let mut lo = 0;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] > t {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Value at t; linear extrapolation outside the knot range keeps the
    /// derivative bounded when trailing observations are missing.
    fn value(&self, t: f64) -> f64 {
        let n = self.xs.len();
        if t <= self.xs[0] {
            return self.ys[0] + self.deriv_at_knot(0) * (t - self.xs[0]);
        }
        if t >= self.xs[n - 1] {
            return self.ys[n - 1] + self.deriv_at_knot(n - 1) * (t - self.xs[n - 1]);
        }
        let lo = self.segment(t);
        let hi = lo + 1;
        let h = self.xs[hi] - self.xs[lo];
        let a = (self.xs[hi] - t) / h;
        let b = (t - self.xs[lo]) / h;
        a * self.ys[lo]
            + b * self.ys[hi]
            + ((a * a * a - a) * self.y2[lo] + (b * b * b - b) * self.y2[hi]) * h * h / 6.0
    }

    fn derivative(&self, t: f64) -> f64 {
        let n = self.xs.len();
        if t <= self.xs[0] {
            return self.deriv_at_knot(0);
        }
        if t >= self.xs[n - 1] {
            return self.deriv_at_knot(n - 1);
        }
        let lo = self.segment(t);
        let hi = lo + 1;
        let h = self.xs[hi] - self.xs[lo];
        let a = (self.xs[hi] - t) / h;
        let b = (t - self.xs[lo]) / h;
        (self.ys[hi] - self.ys[lo]) / h
            + h / 6.0 * ((3.0 * b * b - 1.0) * self.y2[hi] - (3.0 * a * a - 1.0) * self.y2[lo])
    }

    fn deriv_at_knot(&self, k: usize) -> f64 {
        let n = self.xs.len();
        // segment derivative at its endpoints: a=1,b=0 at the left knot and
        // a=0,b=1 at the right knot of (y_hi-y_lo)/h + h/6 ((3b²-1)y2_hi - (3a²-1)y2_lo)
        if k + 1 < n {
            let h = self.xs[k + 1] - self.xs[k];
            (self.ys[k + 1] - self.ys[k]) / h - h / 6.0 * (2.0 * self.y2[k] + self.y2[k + 1])
        } else {
            let h = self.xs[k] - self.xs[k - 1];
            (self.ys[k] - self.ys[k - 1]) / h + h / 6.0 * (2.0 * self.y2[k] + self.y2[k - 1])
        }
    }
}

/// A batch of interpolated control paths. Channel layout is the feature
/// channels followed by the time channel.
#[derive(Debug, Clone)]
pub struct ControlPath {
    splines: Vec<Vec<Spline>>,
    pub channels: usize,
}

/// Interpolate each sample's observed points. Requires at least two observed
/// points per sample.
pub fn build_control_path(batch: &SeriesBatch) -> Result<ControlPath> {
    let dx = batch.dim();
    let mut splines = Vec::with_capacity(batch.n_samples());
    for b in 0..batch.n_samples() {
        let obs: Vec<usize> = (0..batch.len()).filter(|&k| batch.mask[[b, k]]).collect();
        if obs.len() < 2 {
            return Err(Error::Data(format!(
                "sample {b} has {} observed points; need at least 2 for a spline",
                obs.len()
            )));
        }
        let xs: Vec<f64> = obs.iter().map(|&k| batch.times[[b, k]]).collect();
        let mut per_channel = Vec::with_capacity(dx + 1);
        for j in 0..dx {
            let ys: Vec<f64> = obs.iter().map(|&k| batch.values[[b, k, j]]).collect();
            per_channel.push(Spline::fit(xs.clone(), ys));
        }
        // time channel: identity over the knots
        per_channel.push(Spline::fit(xs.clone(), xs.clone()));
        splines.push(per_channel);
    }
    Ok(ControlPath { splines, channels: dx + 1 })
}

impl ControlPath {
    pub fn n_samples(&self) -> usize {
        self.splines.len()
    }

    /// X(t) for every sample at a shared time: [batch, channels].
    pub fn values_at(&self, t: f64) -> Arr {
        let mut out = Arr::zeros((self.n_samples(), self.channels));
        for (b, chans) in self.splines.iter().enumerate() {
            for (j, sp) in chans.iter().enumerate() {
                out[[b, j]] = sp.value(t);
            }
        }
        out
    }

    /// dX/dt for every sample at a shared time: [batch, channels].
    pub fn derivs_at(&self, t: f64) -> Arr {
        let mut out = Arr::zeros((self.n_samples(), self.channels));
        for (b, chans) in self.splines.iter().enumerate() {
            for (j, sp) in chans.iter().enumerate() {
                out[[b, j]] = sp.derivative(t);
            }
        }
        out
    }

    pub fn value(&self, sample: usize, channel: usize, t: f64) -> f64 {
        self.splines[sample][channel].value(t)
    }

    pub fn derivative(&self, sample: usize, channel: usize, t: f64) -> f64 {
        self.splines[sample][channel].derivative(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{inject_missing, synth_sines};
    use crate::rng::substream;

    #[test]
    fn two_points_degenerate_to_a_line() {
        let sp = Spline::fit(vec![0.0, 1.0], vec![2.0, 4.0]);
        for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
            assert!((sp.value(t) - (2.0 + 2.0 * t)).abs() < 1e-12);
            assert!((sp.derivative(t) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolates_knots_to_1e9() {
        let xs = vec![0.0, 0.3, 0.45, 0.8, 1.0];
        let ys = vec![1.0, -0.5, 2.0, 0.25, 0.9];
        let sp = Spline::fit(xs.clone(), ys.clone());
        for (x, y) in xs.iter().zip(ys.iter()) {
            assert!((sp.value(*x) - y).abs() < 1e-9);
        }
    }

    #[test]
    fn first_derivative_continuous_at_interior_knots() {
        let xs = vec![0.0, 0.2, 0.5, 0.7, 1.0];
        let ys = vec![0.3, 0.9, -0.4, 0.1, 0.6];
        let sp = Spline::fit(xs.clone(), ys);
        // eps small enough that one-sided truncation (O(eps * f'')) stays
        // below the 1e-6 agreement bound
        let eps = 1e-9;
        for &x in &xs[1..xs.len() - 1] {
            let left = (sp.value(x) - sp.value(x - eps)) / eps;
            let right = (sp.value(x + eps) - sp.value(x)) / eps;
            assert!((left - right).abs() < 1e-6, "jump at {x}: {left} vs {right}");
            // the analytic one-sided limits agree exactly up to rounding
            let exact_left = sp.derivative(x - 1e-13);
            let exact_right = sp.derivative(x + 1e-13);
            assert!((exact_left - exact_right).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_derivative_matches_finite_differences() {
        let xs = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let ys = vec![0.0, 1.0, 0.5, -0.25, 0.75];
        let sp = Spline::fit(xs, ys);
        for i in 0..40 {
            let t = 0.0125 + i as f64 * 0.024;
            let h = 1e-6;
            let fd = (sp.value(t + h) - sp.value(t - h)) / (2.0 * h);
            assert!((sp.derivative(t) - fd).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn natural_boundary_second_derivative_near_zero() {
        let xs = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let ys = vec![0.0, 1.0, 0.5, -0.25, 0.75];
        let sp = Spline::fit(xs, ys);
        let h = 1e-4;
        // one-sided second difference just inside each end
        let left = (sp.value(0.0) - 2.0 * sp.value(h) + sp.value(2.0 * h)) / (h * h);
        let right = (sp.value(1.0) - 2.0 * sp.value(1.0 - h) + sp.value(1.0 - 2.0 * h)) / (h * h);
        // interior curvature of this data is O(10); the ends must be much flatter
        assert!(left.abs() < 0.5, "left second derivative {left}");
        assert!(right.abs() < 0.5, "right second derivative {right}");
    }

    #[test]
    fn control_path_from_masked_batch() {
        let mut rng = substream(3, "spline");
        let batch = synth_sines(4, 2, 24, &mut rng);
        let missing = inject_missing(&batch, 0.5, &mut rng).unwrap();
        let path = build_control_path(&missing).unwrap();
        assert_eq!(path.channels, 3);
        // passes through observed knots, including the time channel
        for b in 0..4 {
            for k in 0..24 {
                if !missing.mask[[b, k]] {
                    continue;
                }
                let t = missing.times[[b, k]];
                for j in 0..2 {
                    assert!((path.value(b, j, t) - missing.values[[b, k, j]]).abs() < 1e-9);
                }
                assert!((path.value(b, 2, t) - t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_observed_points_is_an_error() {
        let mut rng = substream(4, "spline-err");
        let mut batch = synth_sines(1, 1, 6, &mut rng);
        for k in 1..6 {
            batch.mask[[0, k]] = false;
        }
        batch.regular = false;
        assert!(build_control_path(&batch).is_err());
    }
}
