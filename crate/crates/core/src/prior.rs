//! Spike-and-slab mixture Gaussian prior on network weights.
//!
//! Each weight independently follows
//! `(1 - lambda) N(0, sigma_0^2) + lambda N(0, sigma_1^2)` with
//! `sigma_0 < sigma_1`. Component densities are properly normalised.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, LN_2PI};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    /// Slab mixture proportion.
    pub lambda_n: f64,
    /// Spike standard deviation.
    pub sigma_0: f64,
    /// Slab standard deviation.
    pub sigma_1: f64,
}

impl PriorHyper {
    /// Validated construction from variances.
    pub fn from_variances(lambda_n: f64, sigma0_sq: f64, sigma1_sq: f64) -> Result<Self> {
        let h = PriorHyper {
            lambda_n,
            sigma_0: math::sqrt(sigma0_sq),
            sigma_1: math::sqrt(sigma1_sq),
        };
        h.validate()?;
        Ok(h)
    }

    /// `0 < lambda < 1` and `0 < sigma_0 <= sigma_1`. Equal standard
    /// deviations are accepted (the mixture collapses to one Gaussian).
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_n > 0.0 && self.lambda_n < 1.0) {
            return Err(Error::Config(format!(
                "prior mixture proportion must lie in (0, 1), got {}",
                self.lambda_n
            )));
        }
        if !(self.sigma_0 > 0.0 && self.sigma_0 <= self.sigma_1 && self.sigma_1.is_finite()) {
            return Err(Error::Config(format!(
                "prior needs 0 < sigma_0 <= sigma_1, got sigma_0 = {}, sigma_1 = {}",
                self.sigma_0, self.sigma_1
            )));
        }
        Ok(())
    }

    /// Weighted log component densities `(spike, slab)` at `theta`.
    #[inline]
    fn components(&self, theta: f64) -> (f64, f64) {
        let t2 = theta * theta;
        let spike = math::ln(1.0 - self.lambda_n)
            - 0.5 * LN_2PI
            - math::ln(self.sigma_0)
            - 0.5 * t2 / (self.sigma_0 * self.sigma_0);
        let slab = math::ln(self.lambda_n)
            - 0.5 * LN_2PI
            - math::ln(self.sigma_1)
            - 0.5 * t2 / (self.sigma_1 * self.sigma_1);
        (spike, slab)
    }

    /// Magnitude at which the weighted spike and slab densities are equal.
    /// `None` when the slab dominates everywhere.
    pub fn prune_threshold(&self) -> Option<f64> {
        let s0 = self.sigma_0 * self.sigma_0;
        let s1 = self.sigma_1 * self.sigma_1;
        if s0 >= s1 {
            return if self.lambda_n >= 0.5 { None } else { Some(f64::INFINITY) };
        }
        let rhs = math::ln((1.0 - self.lambda_n) * self.sigma_1 / (self.lambda_n * self.sigma_0));
        if rhs <= 0.0 {
            return None;
        }
        Some(math::sqrt(rhs / (0.5 / s0 - 0.5 / s1)))
    }
}

fn check_finite(theta: &[f64]) -> Result<()> {
    if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("non-finite parameter at index {i}")));
    }
    Ok(())
}

/// Log prior density summed over all entries.
pub fn log_prior(theta: &[f64], hyper: &PriorHyper) -> Result<f64> {
    check_finite(theta)?;
    Ok(theta
        .iter()
        .map(|&t| {
            let (a, b) = hyper.components(t);
            math::log_add_exp(a, b)
        })
        .sum())
}

/// Elementwise derivative `-theta (r0 / sigma_0^2 + r1 / sigma_1^2)` where
/// `r0`, `r1` are the component responsibilities.
#[inline]
pub fn log_prior_grad_scalar(theta: f64, hyper: &PriorHyper) -> f64 {
    let (a, b) = hyper.components(theta);
    let r1 = if a > b {
        let e = math::exp(b - a);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + math::exp(a - b))
    };
    let r0 = 1.0 - r1;
    -theta * (r0 / (hyper.sigma_0 * hyper.sigma_0) + r1 / (hyper.sigma_1 * hyper.sigma_1))
}

pub fn log_prior_grad(theta: &[f64], hyper: &PriorHyper) -> Result<Vec<f64>> {
    check_finite(theta)?;
    Ok(theta.iter().map(|&t| log_prior_grad_scalar(t, hyper)).collect())
}

/// `true` means keep: the weighted slab density is at least the weighted
/// spike density.
pub fn prune_mask(theta: &[f64], hyper: &PriorHyper) -> Vec<bool> {
    theta
        .iter()
        .map(|&t| {
            let (spike, slab) = hyper.components(t);
            slab >= spike
        })
        .collect()
}

/// Outcome of checking the hyperparameter window used by the sparse
/// consistency theory. Purely advisory.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperReport {
    pub c: f64,
    pub lambda_window: (f64, f64),
    pub sigma0_window: (f64, f64),
    pub lambda_ok: bool,
    pub sigma0_ok: bool,
    pub warnings: Vec<String>,
}

impl HyperReport {
    pub fn passed(&self) -> bool {
        self.lambda_ok && self.sigma0_ok
    }
}

/// Check `(n/K)^c < lambda < n/K` and
/// `(n/K)^c < sigma_0 < min{1 - n/K, delta / sqrt(c log K - (c - 1) log n)}`.
pub fn validate_hyper(n: usize, k_n: usize, hyper: &PriorHyper, delta_n: f64, c: f64) -> HyperReport {
    let n_f = n.max(1) as f64;
    let k_f = k_n.max(1) as f64;
    let ratio = n_f / k_f;
    let lower = math::powf(ratio, c);
    let mut warnings = Vec::new();
    if k_n <= n {
        warnings.push(format!(
            "K_n = {k_n} does not exceed n = {n}; the window assumes an over-parameterised network"
        ));
    }
    let lambda_window = (lower, ratio);
    let lambda_ok = hyper.lambda_n > lower && hyper.lambda_n < ratio;
    if !lambda_ok {
        warnings.push(format!(
            "lambda_n = {:e} outside ({:e}, {:e})",
            hyper.lambda_n, lower, ratio
        ));
    }
    let log_term = c * math::ln(k_f) - (c - 1.0) * math::ln(n_f);
    let delta_bound = if log_term > 0.0 {
        delta_n / math::sqrt(log_term)
    } else {
        f64::INFINITY
    };
    let upper = (1.0 - ratio).min(delta_bound);
    let sigma0_window = (lower, upper);
    let sigma0_ok = hyper.sigma_0 > lower && hyper.sigma_0 < upper;
    if !sigma0_ok {
        warnings.push(format!(
            "sigma_0 = {:e} outside ({:e}, {:e})",
            hyper.sigma_0, lower, upper
        ));
    }
    HyperReport {
        c,
        lambda_window,
        sigma0_window,
        lambda_ok,
        sigma0_ok,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn default_hyper() -> PriorHyper {
        PriorHyper::from_variances(1e-6, 1e-4, 1e-1).unwrap()
    }

    #[test]
    fn collapsed_mixture_at_zero() {
        let h = PriorHyper { lambda_n: 0.5, sigma_0: 1.0, sigma_1: 1.0 };
        let v = log_prior(&[0.0], &h).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn equal_components_reduce_to_gaussian() {
        for &lambda in &[1e-6, 0.3, 0.9] {
            let h = PriorHyper { lambda_n: lambda, sigma_0: 0.7, sigma_1: 0.7 };
            for &t in &[-2.0, 0.1, 3.0] {
                let g = math::normal_log_pdf(t, 0.0, 0.49);
                assert!((log_prior(&[t], &h).unwrap() - g).abs() < 1e-12);
                assert!((log_prior_grad_scalar(t, &h) + t / 0.49).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_hyper_at_point_three() {
        // independent evaluation in plain arithmetic, no log-sum-exp
        let h = default_hyper();
        let t: f64 = 0.3;
        let s0: f64 = 1e-4;
        let s1: f64 = 1e-1;
        let pi2 = 2.0 * core::f64::consts::PI;
        let spike = (1.0 - 1e-6) * libm::exp(-t * t / (2.0 * s0)) / libm::sqrt(pi2 * s0);
        let slab = 1e-6 * libm::exp(-t * t / (2.0 * s1)) / libm::sqrt(pi2 * s1);
        let expect = libm::log(spike + slab);
        let got = log_prior(&[t], &h).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect.abs(), "{got} vs {expect}");
    }

    #[test]
    fn gradient_zero_at_origin() {
        assert_eq!(log_prior_grad_scalar(0.0, &default_hyper()), 0.0);
    }

    #[test]
    fn stable_for_huge_weights() {
        let h = PriorHyper::from_variances(1e-6, 1e-5, 1e-1).unwrap();
        for &t in &[1e6, -1e6, 1e3] {
            let v = log_prior(&[t], &h).unwrap();
            let g = log_prior_grad_scalar(t, &h);
            assert!(v.is_finite() && g.is_finite());
            assert!(g * t < 0.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(log_prior(&[f64::NAN], &default_hyper()), Err(Error::Numeric(_))));
        assert!(log_prior_grad(&[f64::INFINITY], &default_hyper()).is_err());
    }

    #[test]
    fn prune_zero_and_keep_large() {
        let h = default_hyper();
        assert_eq!(prune_mask(&[0.0, 1.0, -1.0], &h), vec![false, true, true]);
    }

    #[test]
    fn prune_threshold_is_crossover() {
        let h = default_hyper();
        let t = h.prune_threshold().unwrap();
        let (a, b) = h.components(t);
        assert!((a - b).abs() < 1e-9);
        assert_eq!(prune_mask(&[t * 0.999, t * 1.001], &h), vec![false, true]);
        assert_eq!(prune_mask(&[-t * 0.999, -t * 1.001], &h), vec![false, true]);
    }

    #[test]
    fn lambda_near_one_keeps_everything() {
        let h = PriorHyper { lambda_n: 1.0 - 1e-12, sigma_0: 0.01, sigma_1: 1.0 };
        let theta: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.001).collect();
        assert!(prune_mask(&theta, &h).iter().all(|&k| k));
    }

    #[test]
    fn invalid_hyper_rejected() {
        assert!(PriorHyper::from_variances(0.0, 1e-4, 1e-1).is_err());
        assert!(PriorHyper::from_variances(0.5, 1.0, 1e-1).is_err());
    }

    #[test]
    fn hyper_window_lambda_below_lower_bound() {
        let r = validate_hyper(1000, 1_000_000, &default_hyper(), 0.1, 1.1);
        // (1e-3)^1.1 = 5.0119e-4
        assert!((r.lambda_window.0 - 5.011_872_336_272_72e-4).abs() < 1e-15);
        assert!(!r.lambda_ok);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn hyper_window_boundary_is_strict() {
        let h = PriorHyper { lambda_n: 1e-3, sigma_0: 0.01, sigma_1: 0.3 };
        let r = validate_hyper(1000, 1_000_000, &h, 0.1, 1.1);
        assert!(!r.lambda_ok);
    }

    #[test]
    fn hyper_window_sigma0_inside_passes() {
        // window for sigma_0: (5.01e-4, min(0.999, 0.1 / sqrt(1.1 ln 1e6 - 0.1 ln 1e3)))
        // = (5.01e-4, 0.1 / sqrt(15.197 - 0.691)) = (5.01e-4, 0.02626)
        let h = PriorHyper { lambda_n: 7e-4, sigma_0: 0.01, sigma_1: 0.3 };
        let r = validate_hyper(1000, 1_000_000, &h, 0.1, 1.1);
        assert!(r.sigma0_ok, "{:?}", r);
        assert!(r.lambda_ok);
        assert!(r.passed());
        assert!((r.sigma0_window.1 - 0.026_256).abs() < 1e-4);
    }
}
