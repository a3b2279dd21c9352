//! Monte Carlo potential outcomes, treatment-effect contrasts and metrics.
//!
//! Each unit's latent draws come from `N(mu_1(input_i), sigma_z2 I)`, and
//! every arm of a contrast reuses the same draws.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::model::{latent_conditional_mean, predict_outcome, Dataset, StoNetModel, TreatmentKind};
use crate::rng::standard_normal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub value: f64,
    /// Standard error from the spread of per-unit averages.
    pub se: f64,
}

/// Everything estimated for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    /// `(treatment value, psi)` pairs.
    pub psi: Vec<(Vec<f64>, PsiEstimate)>,
    pub ate: Option<f64>,
    pub cate: Option<Vec<f64>>,
    pub draws: usize,
    pub seed: u64,
}

fn check_estimable(model: &StoNetModel, data: &Dataset, draws: usize) -> Result<()> {
    model.check_data(data)?;
    if draws == 0 {
        return Err(Error::Config("at least one Monte Carlo draw is required".into()));
    }
    if model.d_y != 1 {
        return Err(Error::Config(format!(
            "effect estimation needs a scalar outcome, model has d_Y = {}",
            model.d_y
        )));
    }
    if !(model.sigma_z2 >= 0.0 && model.sigma_z2.is_finite()) {
        return Err(Error::Config(format!("invalid latent variance {}", model.sigma_z2)));
    }
    Ok(())
}

/// Per-unit Monte Carlo means of the outcome net under each treatment
/// assignment in `arms` (each `n x d_A`), sharing latent draws across arms.
fn arm_means<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    arms: &[Matrix],
    draws: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    check_estimable(model, data, draws)?;
    let n = data.n();
    let mu1 = latent_conditional_mean(model, data)?;
    let sd = math::sqrt(model.sigma_z2);
    let mut sums = vec![vec![0.0; n]; arms.len()];
    let mut z = mu1.clone();
    for _ in 0..draws {
        if sd > 0.0 {
            for (zv, &m) in z.as_mut_slice().iter_mut().zip(mu1.as_slice()) {
                *zv = m + sd * standard_normal(rng);
            }
        }
        for (arm, sum) in arms.iter().zip(sums.iter_mut()) {
            let y = predict_outcome(model, &z, arm, data.x.as_ref())?;
            for (s, v) in sum.iter_mut().zip(y.as_slice()) {
                *s += v;
            }
        }
    }
    let inv = 1.0 / draws as f64;
    for sum in &mut sums {
        for s in sum.iter_mut() {
            *s *= inv;
        }
    }
    Ok(sums)
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> PsiEstimate {
    let n = values.len();
    if n == 0 {
        return PsiEstimate { value: f64::NAN, se: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        math::sqrt(var / n as f64)
    } else {
        0.0
    };
    PsiEstimate { value: mean, se }
}

fn constant_arm(n: usize, a: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(n, a.len());
    for i in 0..n {
        m.row_mut(i).copy_from_slice(a);
    }
    m
}

/// `psi(a)`: average outcome when every unit receives treatment `a`.
pub fn potential_outcome<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    a: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<PsiEstimate> {
    if a.len() != model.d_a {
        return Err(Error::Dimension(format!(
            "treatment value has {} components, model expects {}",
            a.len(),
            model.d_a
        )));
    }
    let per_unit = arm_means(model, data, &[constant_arm(data.n(), a)], draws, rng)?;
    Ok(mean_se(&per_unit[0]))
}

/// Potential outcomes at several treatment values, each with fresh draws.
pub fn potential_outcomes<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    grid: &[Vec<f64>],
    draws: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, PsiEstimate)>> {
    grid.iter()
        .map(|a| Ok((a.clone(), potential_outcome(model, data, a, draws, rng)?)))
        .collect()
}

fn require_binary(model: &StoNetModel) -> Result<()> {
    if model.treatment != TreatmentKind::Binary || model.d_a != 1 {
        return Err(Error::Config(
            "treatment-effect contrasts need a single binary treatment".into(),
        ));
    }
    Ok(())
}

/// Per-unit effect `E[mu(z, 1) - mu(z, 0)]` over unit-specific draws.
pub fn cate_per_unit<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    require_binary(model)?;
    let n = data.n();
    let arms = [Matrix::filled(n, 1, 1.0), Matrix::filled(n, 1, 0.0)];
    let m = arm_means(model, data, &arms, draws, rng)?;
    Ok(m[0].iter().zip(&m[1]).map(|(a, b)| a - b).collect())
}

/// `psi(1) - psi(0)` with shared draws.
pub fn ate<R: Rng + ?Sized>(model: &StoNetModel, data: &Dataset, draws: usize, rng: &mut R) -> Result<f64> {
    let cate = cate_per_unit(model, data, draws, rng)?;
    Ok(mean_se(&cate).value)
}

/// ATE, CATE and both potential outcomes from one set of draws.
pub fn binary_effects<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    draws: usize,
    seed: u64,
    rng: &mut R,
) -> Result<CausalEstimate> {
    require_binary(model)?;
    let n = data.n();
    let arms = [Matrix::filled(n, 1, 1.0), Matrix::filled(n, 1, 0.0)];
    let m = arm_means(model, data, &arms, draws, rng)?;
    let cate: Vec<f64> = m[0].iter().zip(&m[1]).map(|(a, b)| a - b).collect();
    Ok(CausalEstimate {
        psi: vec![(vec![1.0], mean_se(&m[0])), (vec![0.0], mean_se(&m[1]))],
        ate: Some(mean_se(&cate).value),
        cate: Some(cate),
        draws,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffects {
    /// Average effect per treatment component.
    pub effects: Vec<f64>,
    pub se: Vec<f64>,
    /// `n x d_A` per-unit finite-difference effects.
    pub per_unit: Matrix,
    pub delta: f64,
}

/// Symmetric finite-difference effect of each treatment component around
/// every unit's observed treatment.
pub fn marginal_effects<R: Rng + ?Sized>(
    model: &StoNetModel,
    data: &Dataset,
    draws: usize,
    delta: f64,
    rng: &mut R,
) -> Result<MarginalEffects> {
    if model.treatment != TreatmentKind::Continuous {
        return Err(Error::Config("marginal effects need continuous treatments".into()));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {delta}")));
    }
    let d = model.d_a;
    let mut arms = Vec::with_capacity(2 * d);
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut a = data.a.clone();
            for i in 0..a.rows() {
                let v = a.get(i, j) + sign * delta;
                a.set(i, j, v);
            }
            arms.push(a);
        }
    }
    let means = arm_means(model, data, &arms, draws, rng)?;
    let n = data.n();
    let mut per_unit = Matrix::zeros(n, d);
    let mut effects = Vec::with_capacity(d);
    let mut se = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = means[2 * j]
            .iter()
            .zip(&means[2 * j + 1])
            .map(|(p, m)| (p - m) / (2.0 * delta))
            .collect();
        for (i, v) in col.iter().enumerate() {
            per_unit.set(i, j, *v);
        }
        let s = mean_se(&col);
        effects.push(s.value);
        se.push(s.se);
    }
    Ok(MarginalEffects { effects, se, per_unit, delta })
}

/// Root mean squared difference between estimated and true unit effects.
pub fn pehe(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::Dimension(format!(
            "PEHE needs equal non-empty vectors, got {} and {}",
            estimate.len(),
            truth.len()
        )));
    }
    let ss: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(math::sqrt(ss / estimate.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MaeAte,
    RmseAte,
    Pehe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: MetricKind,
    pub value: f64,
    /// Spread across datasets, where meaningful.
    pub sd: Option<f64>,
    pub n_datasets: usize,
}

fn check_pairs(est: &[f64], truth: &[f64]) -> Result<()> {
    if est.len() != truth.len() || est.is_empty() {
        return Err(Error::Dimension(format!(
            "need equal non-empty estimate and truth vectors, got {} and {}",
            est.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    math::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
}

/// Mean absolute ATE error across datasets, with its sample SD.
pub fn mae_ate(estimates: &[f64], truths: &[f64]) -> Result<MetricRecord> {
    check_pairs(estimates, truths)?;
    let errs: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| math::abs(e - t)).collect();
    Ok(MetricRecord {
        name: MetricKind::MaeAte,
        value: errs.iter().sum::<f64>() / errs.len() as f64,
        sd: Some(sample_sd(&errs)),
        n_datasets: errs.len(),
    })
}

pub fn rmse_ate(estimates: &[f64], truths: &[f64]) -> Result<MetricRecord> {
    check_pairs(estimates, truths)?;
    let ss: f64 = estimates.iter().zip(truths).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(MetricRecord {
        name: MetricKind::RmseAte,
        value: math::sqrt(ss / estimates.len() as f64),
        sd: None,
        n_datasets: estimates.len(),
    })
}

/// Mean PEHE across datasets with its sample SD.
pub fn pehe_record(values: &[f64]) -> Result<MetricRecord> {
    if values.is_empty() {
        return Err(Error::Dimension("no PEHE values to summarise".into()));
    }
    Ok(MetricRecord {
        name: MetricKind::Pehe,
        value: values.iter().sum::<f64>() / values.len() as f64,
        sd: Some(sample_sd(values)),
        n_datasets: values.len(),
    })
}
