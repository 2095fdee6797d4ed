//! Forward/reverse diffusion SDE families (VP, subVP, VE) with closed-form
//! Gaussian transition kernels.
//!
//! All three families share the interval s ∈ [0, 1] and an affine (or zero)
//! drift, so the transition kernel p(x^s | x^0) is Gaussian with moments
//! `mean_coeff(s) * x0` and `std(s)`:
//!
//! | kind  | drift          | diffusion                      | mean_coeff   | std                 |
//! |-------|----------------|--------------------------------|--------------|---------------------|
//! | VP    | -β(s)/2 · x    | sqrt(β(s))                     | e^{-B(s)/2}  | sqrt(1 - e^{-B(s)}) |
//! | subVP | -β(s)/2 · x    | sqrt(β(s)(1 - e^{-2B(s)}))     | e^{-B(s)/2}  | 1 - e^{-B(s)}       |
//! | VE    | 0              | sqrt(dσ²/ds)                   | 1            | sqrt(σ²(s) - σ²(0)) |
//!
//! with β(s) linear between `beta_min` and `beta_max`, B(s) = ∫₀ˢ β, and
//! σ(s) geometric between `sigma_min` and `sigma_max`.

use crate::error::{Error, Result};
use crate::rng::randn;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-time lower clip for the diffusion time: the transition kernel is
/// degenerate at s = 0, so s is drawn uniformly from [TRAIN_EPS, 1].
pub const TRAIN_EPS: f64 = 1e-5;

/// Which SDE family a schedule belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Vp,
    SubVp,
    Ve,
}

impl std::fmt::Display for SdeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SdeKind::Vp => write!(f, "vp"),
            SdeKind::SubVp => write!(f, "subvp"),
            SdeKind::Ve => write!(f, "ve"),
        }
    }
}

/// A diffusion schedule: family plus noise parameters. Immutable once built;
/// every method on it is a pure function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub kind: SdeKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Moments of the Gaussian transition kernel p(x^s | x^0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMoments {
    /// Scalar multiplying x0 in the kernel mean.
    pub mean_coeff: f64,
    /// Kernel standard deviation.
    pub std: f64,
}

impl SdeSpec {
    pub fn new(
        kind: SdeKind,
        beta_min: f64,
        beta_max: f64,
        sigma_min: f64,
        sigma_max: f64,
    ) -> Result<Self> {
        if beta_min < 0.0 || beta_max < beta_min {
            return Err(Error::Config(format!(
                "require 0 <= beta_min <= beta_max, got {beta_min} / {beta_max}"
            )));
        }
        if sigma_min <= 0.0 || sigma_max <= sigma_min {
            return Err(Error::Config(format!(
                "require 0 < sigma_min < sigma_max, got {sigma_min} / {sigma_max}"
            )));
        }
        Ok(SdeSpec {
            kind,
            beta_min,
            beta_max,
            sigma_min,
            sigma_max,
        })
    }

    /// VP schedule with the reference defaults beta_min=0.1, beta_max=20.
    pub fn vp_default() -> Self {
        Self::new(SdeKind::Vp, 0.1, 20.0, 0.01, 50.0).expect("defaults are valid")
    }

    /// subVP schedule with the same beta defaults.
    pub fn subvp_default() -> Self {
        Self::new(SdeKind::SubVp, 0.1, 20.0, 0.01, 50.0).expect("defaults are valid")
    }

    /// VE schedule with sigma_min=0.01, sigma_max=50. Supported by the kernel
    /// layer; no tuned training presets ship for it.
    pub fn ve_default() -> Self {
        Self::new(SdeKind::Ve, 0.1, 20.0, 0.01, 50.0).expect("defaults are valid")
    }

    fn check_time(&self, s: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("diffusion time {s} outside [0,1]")));
        }
        Ok(())
    }

    /// β(s), linear between beta_min and beta_max. VP/subVP only.
    pub fn beta_at(&self, s: f64) -> Result<f64> {
        self.check_time(s)?;
        if self.kind == SdeKind::Ve {
            return Err(Error::Domain("beta(s) is undefined for the VE family".into()));
        }
        Ok(self.beta_min + s * (self.beta_max - self.beta_min))
    }

    /// B(s) = ∫₀ˢ β(t) dt for the linear schedule.
    pub fn beta_integral(&self, s: f64) -> Result<f64> {
        self.check_time(s)?;
        if self.kind == SdeKind::Ve {
            return Err(Error::Domain("beta(s) is undefined for the VE family".into()));
        }
        Ok(self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s)
    }

    /// σ(s) for VE: geometric between sigma_min and sigma_max.
    pub fn sigma_at(&self, s: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(s)
    }

    /// Drift term f(s, x) of the forward SDE, evaluated elementwise on x.
    pub fn drift(&self, s: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_time(s)?;
        match self.kind {
            SdeKind::Vp | SdeKind::SubVp => {
                let b = self.beta_at(s)?;
                Ok(x * (-0.5 * b))
            }
            SdeKind::Ve => Ok(Array2::zeros(x.raw_dim())),
        }
    }

    /// Scalar diffusion term g(s) of the forward SDE.
    pub fn diffusion(&self, s: f64) -> Result<f64> {
        self.check_time(s)?;
        match self.kind {
            SdeKind::Vp => Ok(self.beta_at(s)?.sqrt()),
            SdeKind::SubVp => {
                let b = self.beta_at(s)?;
                let big_b = self.beta_integral(s)?;
                Ok((b * (1.0 - (-2.0 * big_b).exp())).sqrt())
            }
            SdeKind::Ve => {
                // d sigma^2 / ds = 2 sigma^2(s) ln(sigma_max / sigma_min)
                let sig = self.sigma_at(s);
                Ok(sig * (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt())
            }
        }
    }

    /// Closed-form kernel moments at diffusion time s.
    pub fn transition(&self, s: f64) -> Result<KernelMoments> {
        self.check_time(s)?;
        match self.kind {
            SdeKind::Vp => {
                let big_b = self.beta_integral(s)?;
                Ok(KernelMoments {
                    mean_coeff: (-0.5 * big_b).exp(),
                    std: (1.0 - (-big_b).exp()).max(0.0).sqrt(),
                })
            }
            SdeKind::SubVp => {
                let big_b = self.beta_integral(s)?;
                Ok(KernelMoments {
                    mean_coeff: (-0.5 * big_b).exp(),
                    std: 1.0 - (-big_b).exp(),
                })
            }
            SdeKind::Ve => {
                let v = self.sigma_at(s).powi(2) - self.sigma_min.powi(2);
                Ok(KernelMoments {
                    mean_coeff: 1.0,
                    std: v.max(0.0).sqrt(),
                })
            }
        }
    }

    /// Reparameterized draw from the transition kernel:
    /// mean_coeff(s)·x0 + std(s)·noise.
    pub fn perturb(&self, s: f64, x0: &Array2<f64>, noise: &Array2<f64>) -> Result<Array2<f64>> {
        if x0.raw_dim() != noise.raw_dim() {
            return Err(Error::Shape(format!(
                "perturb: x0 {:?} vs noise {:?}",
                x0.shape(),
                noise.shape()
            )));
        }
        let m = self.transition(s)?;
        Ok(x0 * m.mean_coeff + noise * m.std)
    }

    /// Analytic score of the transition kernel,
    /// ∇_{x^s} log p(x^s | x^0) = -(x^s - mean_coeff·x0) / std².
    pub fn kernel_score(&self, s: f64, x_s: &Array2<f64>, x0: &Array2<f64>) -> Result<Array2<f64>> {
        if x_s.raw_dim() != x0.raw_dim() {
            return Err(Error::Shape(format!(
                "kernel_score: x_s {:?} vs x0 {:?}",
                x_s.shape(),
                x0.shape()
            )));
        }
        let m = self.transition(s)?;
        if m.std <= 0.0 {
            return Err(Error::Domain(
                "kernel_score is undefined at s = 0 (degenerate kernel)".into(),
            ));
        }
        let var = m.std * m.std;
        Ok((x_s - &(x0 * m.mean_coeff)) * (-1.0 / var))
    }

    /// Draw from the prior p_1: standard normal for VP/subVP, N(0, σ²(1)-σ²(0))
    /// for VE.
    pub fn prior_sample(&self, rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        let z = randn(rng, rows, cols);
        match self.kind {
            SdeKind::Vp | SdeKind::SubVp => z,
            SdeKind::Ve => {
                let std = (self.sigma_max.powi(2) - self.sigma_min.powi(2)).sqrt();
                z * std
            }
        }
    }

    /// Loss weight λ(s) = std(s)² of the transition kernel, which makes the
    /// weighted denoising score-matching loss equal noise prediction in
    /// expectation.
    pub fn lambda_weight(&self, s: f64) -> Result<f64> {
        if s <= 0.0 {
            return Err(Error::Domain("lambda(s) is undefined at s = 0".into()));
        }
        let m = self.transition(s)?;
        Ok(m.std * m.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn vp() -> SdeSpec {
        SdeSpec::vp_default()
    }
    fn subvp() -> SdeSpec {
        SdeSpec::subvp_default()
    }
    fn ve() -> SdeSpec {
        SdeSpec::ve_default()
    }

    #[test]
    fn beta_at_endpoints_and_midpoint() {
        assert_relative_eq!(vp().beta_at(0.0).unwrap(), 0.1);
        assert_relative_eq!(vp().beta_at(0.5).unwrap(), 10.05);
        assert_relative_eq!(vp().beta_at(1.0).unwrap(), 20.0);
    }

    #[test]
    fn beta_at_rejects_bad_domain() {
        assert!(vp().beta_at(-0.1).is_err());
        assert!(vp().beta_at(1.1).is_err());
        assert!(ve().beta_at(0.5).is_err());
    }

    #[test]
    fn beta_integral_closed_form() {
        assert_relative_eq!(vp().beta_integral(0.0).unwrap(), 0.0);
        assert_relative_eq!(vp().beta_integral(1.0).unwrap(), 10.05);
        assert_relative_eq!(vp().beta_integral(0.5).unwrap(), 2.5375);
    }

    #[test]
    fn beta_integral_matches_quadrature() {
        // Composite Simpson over [0, s] as the independent cross-check.
        let spec = vp();
        for &s in &[0.1, 0.3, 0.5, 0.9, 1.0] {
            let n = 2000;
            let h = s / n as f64;
            let mut acc = spec.beta_at(0.0).unwrap() + spec.beta_at(s).unwrap();
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * spec.beta_at(i as f64 * h).unwrap();
            }
            let quad = acc * h / 3.0;
            assert_relative_eq!(spec.beta_integral(s).unwrap(), quad, max_relative = 1e-10);
        }
    }

    #[test]
    fn drift_values() {
        let zero = array![[0.0]];
        assert_eq!(vp().drift(0.3, &zero).unwrap(), zero);
        let x = array![[1.0]];
        assert_relative_eq!(vp().drift(0.5, &x).unwrap()[[0, 0]], -5.025);
        let x = array![[3.2]];
        assert_eq!(ve().drift(0.7, &x).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn diffusion_values() {
        assert!(subvp().diffusion(0.0).unwrap() < 1e-6);
        assert_relative_eq!(vp().diffusion(0.5).unwrap(), 10.05f64.sqrt(), max_relative = 1e-12);
        let expect = (20.0 * (1.0 - (-20.1f64).exp())).sqrt();
        assert_relative_eq!(subvp().diffusion(1.0).unwrap(), expect, max_relative = 1e-12);
        assert_relative_eq!(subvp().diffusion(1.0).unwrap(), 4.4721, max_relative = 1e-4);
    }

    #[test]
    fn transition_identity_at_zero() {
        for spec in [vp(), subvp(), ve()] {
            let m = spec.transition(0.0).unwrap();
            assert_relative_eq!(m.mean_coeff, 1.0, max_relative = 1e-12);
            assert!(m.std.abs() < 1e-12);
        }
    }

    #[test]
    fn transition_closed_forms_at_one() {
        let m = vp().transition(1.0).unwrap();
        assert_relative_eq!(m.mean_coeff, (-5.025f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(m.mean_coeff, 6.57e-3, max_relative = 1e-3);
        assert_relative_eq!(m.std, (1.0 - (-10.05f64).exp()).sqrt(), max_relative = 1e-12);

        let m = subvp().transition(1.0).unwrap();
        assert_relative_eq!(m.mean_coeff, (-5.025f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(m.std, 1.0 - (-10.05f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(m.std, 0.9999568, max_relative = 1e-6);
    }

    #[test]
    fn perturb_paths() {
        let x0 = array![[1.0]];
        let noise = array![[0.0]];
        let out = vp().perturb(0.0, &x0, &noise).unwrap();
        assert_relative_eq!(out[[0, 0]], 1.0, max_relative = 1e-12);

        let out = vp().perturb(1.0, &x0, &noise).unwrap();
        assert_relative_eq!(out[[0, 0]], (-5.025f64).exp(), max_relative = 1e-12);

        let x0 = array![[0.0]];
        let noise = array![[1.0]];
        let out = vp().perturb(1.0, &x0, &noise).unwrap();
        assert_relative_eq!(out[[0, 0]], (1.0 - (-10.05f64).exp()).sqrt(), max_relative = 1e-12);

        let bad = vp().perturb(0.5, &array![[0.0]], &array![[0.0, 1.0]]);
        assert!(bad.is_err());
    }

    #[test]
    fn kernel_score_zero_at_mean_and_rejects_s0() {
        let spec = vp();
        let x0 = array![[0.7, -0.3]];
        let m = spec.transition(0.6).unwrap();
        let x_s = &x0 * m.mean_coeff;
        let score = spec.kernel_score(0.6, &x_s, &x0).unwrap();
        assert!(score.iter().all(|v| v.abs() < 1e-12));
        assert!(spec.kernel_score(0.0, &x0, &x0).is_err());
    }

    #[test]
    fn kernel_score_closed_form_at_one() {
        let spec = vp();
        let x0 = array![[0.0]];
        let x_s = array![[1.0]];
        let score = spec.kernel_score(1.0, &x_s, &x0).unwrap();
        let var = 1.0 - (-10.05f64).exp();
        assert_relative_eq!(score[[0, 0]], -1.0 / var, max_relative = 1e-12);
        assert_relative_eq!(score[[0, 0]], -1.0, max_relative = 1e-4);
    }

    #[test]
    fn kernel_score_matches_finite_differences() {
        // Central differences of the analytic Gaussian log-density. The
        // log-density is quadratic in x, so central differences are exact up
        // to rounding.
        let mut rng = substream(13, "sde-fd");
        for spec in [vp(), subvp(), ve()] {
            for _ in 0..20 {
                let s = rng.random_range(0.05..=1.0);
                let x0 = randn(&mut rng, 1, 3);
                let noise = randn(&mut rng, 1, 3);
                let x_s = spec.perturb(s, &x0, &noise).unwrap();
                let score = spec.kernel_score(s, &x_s, &x0).unwrap();
                let m = spec.transition(s).unwrap();
                let logp = |x: &Array2<f64>| -> f64 {
                    let d = x - &(&x0 * m.mean_coeff);
                    -d.iter().map(|v| v * v).sum::<f64>() / (2.0 * m.std * m.std)
                };
                let h = 1e-5;
                for j in 0..3 {
                    let mut xp = x_s.clone();
                    let mut xm = x_s.clone();
                    xp[[0, j]] += h;
                    xm[[0, j]] -= h;
                    let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
                    let a = score[[0, j]];
                    let denom = a.abs().max(1e-6);
                    assert!(
                        (fd - a).abs() / denom < 1e-4,
                        "fd {fd} vs analytic {a} (kind {:?}, s {s})",
                        spec.kind
                    );
                }
            }
        }
    }

    #[test]
    fn prior_sample_is_seeded_and_moment_correct() {
        let spec = vp();
        let mut r1 = substream(3, "prior");
        let mut r2 = substream(3, "prior");
        assert_eq!(spec.prior_sample(&mut r1, 4, 4), spec.prior_sample(&mut r2, 4, 4));

        let mut rng = substream(11, "prior-moments");
        let draws = spec.prior_sample(&mut rng, 100_000, 1);
        let mean = draws.mean().unwrap();
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (draws.len() as f64 - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());

        let draws = ve().prior_sample(&mut rng, 100_000, 1);
        let mean = draws.mean().unwrap();
        let std = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (draws.len() as f64 - 1.0))
            .sqrt();
        let expect = (2500.0f64 - 0.0001).sqrt();
        assert!((std - expect).abs() / expect < 0.02, "ve std {std} vs {expect}");
    }

    #[test]
    fn lambda_weight_values() {
        assert!(vp().lambda_weight(0.0).is_err());
        assert!(vp().lambda_weight(1e-6).unwrap() < 1e-4);
        let v = 1.0 - (-10.05f64).exp();
        assert_relative_eq!(vp().lambda_weight(1.0).unwrap(), v, max_relative = 1e-12);
        assert_relative_eq!(subvp().lambda_weight(1.0).unwrap(), v * v, max_relative = 1e-12);
        assert_relative_eq!(subvp().lambda_weight(1.0).unwrap(), 0.999914, max_relative = 1e-4);
    }

    #[test]
    fn subvp_std_below_vp_std_on_grid() {
        let vp = vp();
        let subvp = subvp();
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            let a = subvp.transition(s).unwrap().std;
            let b = vp.transition(s).unwrap().std;
            assert!(a <= b, "subVP std {a} > VP std {b} at s={s}");
        }
    }

    #[test]
    fn moments_are_monotone_on_grid() {
        for spec in [vp(), subvp(), ve()] {
            let mut prev = spec.transition(0.0).unwrap();
            for i in 1..=100 {
                let s = i as f64 / 100.0;
                let m = spec.transition(s).unwrap();
                assert!(m.mean_coeff <= prev.mean_coeff + 1e-12);
                assert!(m.std >= prev.std - 1e-12);
                prev = m;
            }
        }
    }
}
