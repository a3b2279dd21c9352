//! Latent overlap stress test and warm-start bootstrap intervals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::ate;
use crate::linalg::{cholesky_solve, dot, Matrix};
use crate::math::{self, expit};
use crate::model::{Dataset, StoNetModel, TreatmentKind};
use crate::prior::PriorHyper;
use crate::rng::{derive_seed, substream};
use crate::sghmc::{impute_latent_step, train, ImputeStep, LatentState, StageEpochs, TrainSchedule};

/// Logistic regression `P(A = 1 | z) = expit(b_0 + b^T z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Intercept first.
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn predict(&self, z: &[f64]) -> f64 {
        expit(self.coef[0] + dot(&self.coef[1..], z))
    }

    pub fn predict_all(&self, z: &Matrix) -> Vec<f64> {
        (0..z.rows()).map(|i| self.predict(z.row(i))).collect()
    }
}

pub const PROPENSITY_MAX_ITER: usize = 500;
pub const PROPENSITY_TOL: f64 = 1e-8;

/// Fit by minorise-maximise ascent with the fixed curvature bound
/// `X^T X / 4`, stopping once the mean gradient norm drops below
/// [`PROPENSITY_TOL`] or after [`PROPENSITY_MAX_ITER`] steps.
pub fn fit_propensity(z: &Matrix, a: &[f64]) -> Result<LogisticModel> {
    let n = z.rows();
    if a.len() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "propensity fit needs one treatment per row ({} rows, {} treatments)",
            n,
            a.len()
        )));
    }
    if a.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config("propensity fit needs 0/1 treatments".into()));
    }
    let treated = a.iter().filter(|&&v| v == 1.0).count();
    if treated == 0 || treated == n {
        return Err(Error::DegenerateFit(format!(
            "all {n} units share one treatment arm; the propensity model is not identifiable"
        )));
    }
    let d = z.cols() + 1;
    let mut gram = vec![0.0; d * d];
    let mut row = vec![1.0; d];
    for i in 0..n {
        row[1..].copy_from_slice(z.row(i));
        for r in 0..d {
            for c in 0..=r {
                gram[r * d + c] += row[r] * row[c];
            }
        }
    }
    for r in 0..d {
        for c in r + 1..d {
            gram[r * d + c] = gram[c * d + r];
        }
    }
    let solve = |g: &[f64]| -> Option<Vec<f64>> {
        cholesky_solve(&gram, d, g).or_else(|| {
            let mut ridged = gram.clone();
            let mean_diag = (0..d).map(|k| gram[k * d + k]).sum::<f64>() / d as f64;
            for k in 0..d {
                ridged[k * d + k] += 1e-10 * mean_diag.max(1.0);
            }
            cholesky_solve(&ridged, d, g)
        })
    };

    let rate = treated as f64 / n as f64;
    let mut coef = vec![0.0; d];
    coef[0] = math::ln(rate / (1.0 - rate));
    let mut grad = vec![0.0; d];
    for it in 0..PROPENSITY_MAX_ITER {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, &ai) in a.iter().enumerate() {
            let zi = z.row(i);
            let p = expit(coef[0] + dot(&coef[1..], zi));
            let r = ai - p;
            grad[0] += r;
            for (g, x) in grad[1..].iter_mut().zip(zi) {
                *g += r * x;
            }
        }
        let norm = math::sqrt(dot(&grad, &grad)) / n as f64;
        if norm < PROPENSITY_TOL {
            return Ok(LogisticModel { coef, iterations: it, converged: true });
        }
        let step = solve(&grad).ok_or_else(|| {
            Error::DegenerateFit("propensity design matrix is singular".into())
        })?;
        for (c, s) in coef.iter_mut().zip(&step) {
            *c += 4.0 * s;
        }
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("propensity coefficients became non-finite".into()));
        }
    }
    Ok(LogisticModel { coef, iterations: PROPENSITY_MAX_ITER, converged: false })
}

/// Fraction of probabilities outside `[alpha, 1 - alpha]`.
pub fn extreme_fraction(probs: &[f64], alpha: f64) -> f64 {
    let k = probs.iter().filter(|&&p| p < alpha || p > 1.0 - alpha).count();
    k as f64 / probs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub alpha: f64,
    pub draws: usize,
    pub s_values: Vec<f64>,
    pub s_bar: f64,
    /// Fitted propensities of every draw, kept so the statistic can be
    /// re-evaluated at other thresholds.
    #[serde(skip)]
    pub propensities: Vec<Vec<f64>>,
}

impl OverlapReport {
    /// Mean extreme fraction at another threshold, from the same fits.
    pub fn s_bar_at(&self, alpha: f64) -> f64 {
        let s: f64 = self.propensities.iter().map(|p| extreme_fraction(p, alpha)).sum();
        s / self.propensities.len() as f64
    }
}

/// Posterior-draw protocol for the stress test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapProtocol {
    pub burn_in: usize,
    pub thin: usize,
    pub eps: f64,
    pub eta: f64,
    pub leapfrog: bool,
}

impl Default for OverlapProtocol {
    fn default() -> Self {
        OverlapProtocol { burn_in: 200, thin: 10, eps: 1e-3, eta: 1.0, leapfrog: true }
    }
}

/// Draw `draws` posterior imputations from one SGHMC chain started at
/// `mu_1`, fit a propensity model to each, and report the share of units
/// with extreme fitted propensity.
pub fn overlap_stress_test<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    alpha: f64,
    draws: usize,
    protocol: OverlapProtocol,
    rng: &mut R,
) -> Result<OverlapReport> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Config(format!("overlap threshold must lie in (0, 0.5), got {alpha}")));
    }
    if draws == 0 || protocol.thin == 0 {
        return Err(Error::Config("overlap test needs at least one draw and thin >= 1".into()));
    }
    if model.treatment != TreatmentKind::Binary || model.d_a != 1 {
        return Err(Error::Config("overlap test needs a single binary treatment".into()));
    }
    let a = data.a.column(0);
    let step = ImputeStep { eps: protocol.eps, eta: protocol.eta, leapfrog: protocol.leapfrog };
    let mut state = LatentState::at_mean(model, data)?;
    for _ in 0..protocol.burn_in {
        impute_latent_step(&mut state, model, data, None, step, rng)?;
    }
    let mut s_values = Vec::with_capacity(draws);
    let mut propensities = Vec::with_capacity(draws);
    for _ in 0..draws {
        for _ in 0..protocol.thin {
            impute_latent_step(&mut state, model, data, None, step, rng)?;
        }
        let fit = fit_propensity(&state.z, &a)?;
        let p = fit.predict_all(&state.z);
        s_values.push(extreme_fraction(&p, alpha));
        propensities.push(p);
    }
    let s_bar = s_values.iter().sum::<f64>() / draws as f64;
    Ok(OverlapReport { alpha, draws, s_values, s_bar, propensities })
}

/// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = math::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub tau_hat: f64,
    /// Replicate estimates in replicate order.
    pub taus: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub short_epochs: usize,
    /// Monte Carlo draws per unit for each replicate's ATE.
    pub draws: usize,
    /// Source of finetune-stage rates and other SGHMC settings.
    pub schedule: TrainSchedule,
    pub prior: Option<PriorHyper>,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!(
                "bootstrap needs at least 2 replicates, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level must lie in (0, 1), got {}", self.level)));
        }
        if self.draws == 0 {
            return Err(Error::Config("bootstrap needs at least one Monte Carlo draw".into()));
        }
        self.schedule.validate()
    }
}

/// Percentile interval from replicate estimates.
pub fn summarize_bootstrap(tau_hat: f64, taus: Vec<f64>, level: f64) -> Result<BootstrapResult> {
    if taus.len() < 2 {
        return Err(Error::Config("at least 2 replicate estimates are required".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if taus.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("a bootstrap replicate produced a non-finite estimate".into()));
    }
    let mut sorted = taus.clone();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapResult {
        tau_hat,
        lower: quantile(&sorted, tail),
        upper: quantile(&sorted, 1.0 - tail),
        taus,
        level,
    })
}

/// Seed of replicate `index` under master seed `seed`.
pub fn replicate_seed(seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(seed, 0xb007), index as u64)
}

/// One warm-started replicate: resample units with replacement, run
/// `short_epochs` of finetune-stage SGHMC from the fitted parameters, and
/// return the ATE on the resample.
pub fn bootstrap_replicate(
    model: &StoNetModel,
    data: &Dataset,
    config: &BootstrapConfig,
    seed: u64,
    index: usize,
) -> Result<f64> {
    let rs = replicate_seed(seed, index);
    let mut rng = substream(rs, 0);
    let n = data.n();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let resample = data.select_rows(&idx);
    let schedule = TrainSchedule {
        epochs: StageEpochs { pretrain: 0, train: 0, finetune: config.short_epochs },
        ..config.schedule.clone()
    };
    let fitted = train(model.clone(), &resample, &schedule, config.prior.as_ref(), &mut rng, &|| 0.0)
        .map_err(|e| e.context(&format!("bootstrap replicate {index}")))?;
    let mut est_rng = substream(rs, 1);
    ate(&fitted.model, &resample, config.draws, &mut est_rng)
}

/// Full warm-start bootstrap, replicates run in order.
pub fn bootstrap_ci(model: &StoNetModel, data: &Dataset, config: &BootstrapConfig, seed: u64) -> Result<BootstrapResult> {
    config.validate()?;
    let mut rng = substream(derive_seed(seed, 0x7a0), 0);
    let tau_hat = ate(model, data, config.draws, &mut rng)?;
    let taus = (0..config.replicates)
        .map(|b| bootstrap_replicate(model, data, config, seed, b))
        .collect::<Result<Vec<_>>>()?;
    summarize_bootstrap(tau_hat, taus, config.level)
}

/// Full-data ATE that [`bootstrap_ci`] reports as `tau_hat`.
pub fn bootstrap_point_estimate(model: &StoNetModel, data: &Dataset, draws: usize, seed: u64) -> Result<f64> {
    let mut rng = substream(derive_seed(seed, 0x7a0), 0);
    ate(model, data, draws, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert!((quantile(&s, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn summarize_orders_bounds() {
        let r = summarize_bootstrap(0.0, vec![3.0, 1.0, 2.0, 5.0, 4.0], 0.9).unwrap();
        assert!(r.lower <= r.upper);
        assert_eq!(r.taus, vec![3.0, 1.0, 2.0, 5.0, 4.0]);
        assert!(summarize_bootstrap(0.0, vec![1.0], 0.9).is_err());
    }

    #[test]
    fn single_class_is_degenerate() {
        let z = Matrix::zeros(4, 2);
        let r = fit_propensity(&z, &[1.0; 4]);
        assert!(matches!(r, Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn vacuous_threshold() {
        assert_eq!(extreme_fraction(&[0.01, 0.5, 0.99], 1e-300), 0.0);
    }
}
