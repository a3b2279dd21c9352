//! Seeded synthetic data with ground truth.
//!
//! * `SeparableConfounding` / `NonSeparableConfounding`: six latent
//!   confounders drive nine continuous treatments on `[-1, 1]` through a
//!   logistic-tilted density, sampled by exact inversion of its CDF.
//! * `ProxySim`: five confounders observed through 100 noisy proxies,
//!   binary treatment with propensity in `[0.25, 0.5]`, heterogeneous effect
//!   `3 + eta(z)`, arms rebalanced within each split.
//! * `Misspec*`: 50 proxies of five confounders; the outcome-proxy and
//!   treatment-proxy scenarios let `X` enter the outcome or treatment.
//! * `OverlapDegenerate`: a near-deterministic propensity `expit(5 z_1)`
//!   with proxies informative about `z_1`, for overlap diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math::{self, beta24_cdf, expit, norm_cdf, softplus};
use crate::model::{Dataset, Truth};
use crate::rng::{open_unit, standard_normal, substream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    SeparableConfounding,
    NonSeparableConfounding,
    ProxySim,
    MisspecBasicProxy,
    MisspecOutcomeProxy,
    MisspecTreatmentProxy,
    OverlapDegenerate,
}

impl DgpKind {
    pub const ALL: [DgpKind; 7] = [
        DgpKind::SeparableConfounding,
        DgpKind::NonSeparableConfounding,
        DgpKind::ProxySim,
        DgpKind::MisspecBasicProxy,
        DgpKind::MisspecOutcomeProxy,
        DgpKind::MisspecTreatmentProxy,
        DgpKind::OverlapDegenerate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::SeparableConfounding => "separable_confounding",
            DgpKind::NonSeparableConfounding => "non_separable_confounding",
            DgpKind::ProxySim => "proxy_sim",
            DgpKind::MisspecBasicProxy => "misspec_basic_proxy",
            DgpKind::MisspecOutcomeProxy => "misspec_outcome_proxy",
            DgpKind::MisspecTreatmentProxy => "misspec_treatment_proxy",
            DgpKind::OverlapDegenerate => "overlap_degenerate",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        DgpKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn continuous_treatment(self) -> bool {
        matches!(self, DgpKind::SeparableConfounding | DgpKind::NonSeparableConfounding)
    }

    /// Number of proxy columns (0 when the design has none).
    pub fn proxy_dim(self) -> usize {
        match self {
            DgpKind::SeparableConfounding | DgpKind::NonSeparableConfounding => 0,
            DgpKind::ProxySim => PROXY_SIM_DIM,
            DgpKind::MisspecBasicProxy | DgpKind::MisspecOutcomeProxy | DgpKind::MisspecTreatmentProxy => MISSPEC_DIM,
            DgpKind::OverlapDegenerate => OVERLAP_DIM,
        }
    }

    pub fn treatment_dim(self) -> usize {
        if self.continuous_treatment() {
            SIMPLE_TREATMENTS
        } else {
            1
        }
    }
}

const SIMPLE_TREATMENTS: usize = 9;
const PROXY_SIM_DIM: usize = 100;
const MISSPEC_DIM: usize = 50;
const OVERLAP_DIM: usize = 20;

/// `E[f(z_1) f(z_2)]` for independent standard normals, where
/// `f(w) = 2 expit(w - 0.5)`; evaluated by adaptive quadrature as
/// `(E f(z))^2`.
pub const PROXY_SIM_CENTERING: f64 = 0.6335296120562262;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Common coefficient on every term of `xi`.
    pub xi_beta: f64,
    /// Weight on `q(X)` in the outcome-proxy scenario.
    pub outcome_proxy_weight: f64,
    /// Scale on all exogenous outcome and proxy noise; 0 switches it off.
    pub noise_scale: f64,
    /// Fixed coefficient on `f_2` in the separable design instead of a draw.
    pub theta0: Option<f64>,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        DgpSpec {
            kind,
            n_train,
            n_val,
            n_test,
            seed,
            xi_beta: 1.0,
            outcome_proxy_weight: 0.5,
            noise_scale: 1.0,
            theta0: None,
        }
    }

    /// Split sizes used in the published simulations for `kind`.
    pub fn default_sizes(kind: DgpKind, seed: u64) -> Self {
        match kind {
            DgpKind::SeparableConfounding | DgpKind::NonSeparableConfounding => {
                DgpSpec::new(kind, 1000, 200, 1000, seed)
            }
            _ => DgpSpec::new(kind, 2000, 500, 500, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config(format!(
                "split sizes must be positive (train {}, val {}, test {})",
                self.n_train, self.n_val, self.n_test
            )));
        }
        if !self.xi_beta.is_finite() || !self.outcome_proxy_weight.is_finite() {
            return Err(Error::Config("DGP coefficients must be finite".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Named constants drawn or fixed for this dataset.
    pub constants: Vec<(String, f64)>,
}

/// Confounding strength `xi(z)` for a six-dimensional `z`.
pub fn xi(z: &[f64], beta: f64) -> Result<f64> {
    if z.len() != 6 {
        return Err(Error::Dimension(format!("xi takes 6 confounders, got {}", z.len())));
    }
    Ok(xi6(z, beta))
}

fn xi6(z: &[f64], beta: f64) -> f64 {
    beta * (math::sin(z[0]) + math::sin(z[1]))
        + beta * (math::cos(z[2]) + math::cos(z[3]))
        + expit(beta * z[4] - 0.5)
        + expit(beta * z[5] - 0.5)
}

/// CDF on `[-1, 1]` of the density proportional to `expit(c a)`.
pub fn tilted_cdf(c: f64, a: f64) -> f64 {
    if a <= -1.0 {
        return 0.0;
    }
    if a >= 1.0 {
        return 1.0;
    }
    if math::abs(c) < 1e-8 {
        return 0.5 * (a + 1.0);
    }
    (softplus(c * a) - softplus(-c)) / c
}

/// Inverse of [`tilted_cdf`] at `u`.
pub fn sample_treatment_inverse_cdf(c: f64, u: f64) -> f64 {
    if math::abs(c) < 1e-8 {
        return 2.0 * u - 1.0;
    }
    // softplus(c) - softplus(-c) = c
    let w = softplus(-c) + u * c;
    let ca = if w > 1.0 {
        w + math::ln_1p(-math::exp(-w))
    } else {
        math::ln(math::exp_m1(w))
    };
    (ca / c).clamp(-1.0, 1.0)
}

/// `sum_i theta_i a_i^2`
pub fn quad_main(a: &[f64], theta: &[f64]) -> f64 {
    a.iter().zip(theta).map(|(x, t)| t * x * x).sum()
}

/// `sum_{i<j} a_i a_j`
pub fn pairwise(a: &[f64]) -> f64 {
    let s: f64 = a.iter().sum();
    let sq: f64 = a.iter().map(|x| x * x).sum();
    0.5 * (s * s - sq)
}

/// `f(w) = 2 / (1 + exp(-w + 0.5))`
pub fn effect_factor(w: f64) -> f64 {
    2.0 * expit(w - 0.5)
}

/// Centred effect modifier of the proxy simulation.
pub fn proxy_sim_eta(z: &[f64]) -> f64 {
    effect_factor(z[0]) * effect_factor(z[1]) - PROXY_SIM_CENTERING
}

/// Propensity of the proxy simulation, always in `[0.25, 0.5]`.
pub fn proxy_sim_propensity(z: &[f64]) -> f64 {
    let m = (norm_cdf(z[0]) + norm_cdf(z[2]) + norm_cdf(z[4])) / 3.0;
    0.25 * (1.0 + beta24_cdf(m))
}

/// Baseline outcome of the proxy simulation.
pub fn proxy_sim_baseline(z: &[f64]) -> f64 {
    5.0 * z[2] / (1.0 + z[3] * z[3]) + 2.0 * z[4]
}

/// Proxy mean of the misspecification design.
pub fn misspec_h1(z: &[f64]) -> f64 {
    math::sin(z[0]) + 0.5 * z[1] * z[1] + 0.3 * (z[2] + z[3] + z[4])
}

/// Treatment score of the misspecification design.
pub fn misspec_h2(z: &[f64]) -> f64 {
    0.7 * z[0] + 0.3 * z[1] - 0.2 * z[2]
}

pub fn misspec_baseline(z: &[f64]) -> f64 {
    z[0] * z[0] + 0.5 * z[1] * z[2]
}

pub fn misspec_effect(z: &[f64]) -> f64 {
    3.0 + 0.5 * math::sin(z[0])
}

/// Mean absolute proxy value; used for both the treatment and outcome
/// leakage terms.
pub fn mean_abs(x: &[f64]) -> f64 {
    x.iter().map(|v| math::abs(*v)).sum::<f64>() / x.len() as f64
}

fn normals(rng: &mut StreamRng, k: usize) -> Vec<f64> {
    (0..k).map(|_| standard_normal(rng)).collect()
}

fn truncated_normal(rng: &mut StreamRng, mean: f64, lo: f64, hi: f64) -> f64 {
    loop {
        let v = mean + standard_normal(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

fn bernoulli(rng: &mut StreamRng, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Generate train/validation/test splits for `spec`.
pub fn generate(spec: &DgpSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let sizes = [spec.n_train, spec.n_val, spec.n_test];
    match spec.kind {
        DgpKind::SeparableConfounding | DgpKind::NonSeparableConfounding => gen_simple_confounding(spec, sizes),
        DgpKind::ProxySim => gen_proxy_sim(spec, sizes),
        DgpKind::MisspecBasicProxy | DgpKind::MisspecOutcomeProxy | DgpKind::MisspecTreatmentProxy => {
            gen_dag_misspec(spec, sizes)
        }
        DgpKind::OverlapDegenerate => gen_overlap_degenerate(spec, sizes),
    }
}

fn split_rng(seed: u64, split: usize) -> StreamRng {
    substream(seed, split as u64 + 1)
}

struct Rows {
    a: Vec<f64>,
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    cate: Vec<f64>,
    effects: Vec<f64>,
}

impl Rows {
    fn new() -> Self {
        Rows { a: vec![], y: vec![], x: vec![], z: vec![], cate: vec![], effects: vec![] }
    }

    fn into_dataset(self, n: usize, d_a: usize, d_x: usize, d_z: usize, true_ate: Option<f64>) -> Result<Dataset> {
        let x = if d_x > 0 { Some(Matrix::from_vec(n, d_x, self.x)?) } else { None };
        let truth = Truth {
            true_ate,
            true_cate: if self.cate.is_empty() { None } else { Some(self.cate) },
            true_z: Some(Matrix::from_vec(n, d_z, self.z)?),
            marginal_effects: if self.effects.is_empty() {
                None
            } else {
                Some(Matrix::from_vec(n, d_a, self.effects)?)
            },
        };
        Ok(Dataset::new(Matrix::from_vec(n, d_a, self.a)?, Matrix::from_vec(n, 1, self.y)?, x)?.with_truth(truth))
    }
}

fn three(mut v: Vec<Dataset>, constants: Vec<(String, f64)>) -> GeneratedData {
    let test = v.pop().unwrap();
    let val = v.pop().unwrap();
    let train = v.pop().unwrap();
    GeneratedData { train, val, test, constants }
}

fn gen_simple_confounding(spec: &DgpSpec, sizes: [usize; 3]) -> Result<GeneratedData> {
    let separable = spec.kind == DgpKind::SeparableConfounding;
    let mut prng = substream(spec.seed, 0);
    let theta: Vec<f64> = (0..SIMPLE_TREATMENTS).map(|_| prng.random_range(-1.0..1.0)).collect();
    let theta0 = spec.theta0.unwrap_or_else(|| prng.random_range(-1.0..1.0));
    let mut constants: Vec<(String, f64)> = theta
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("theta_{}", i + 1), *t))
        .collect();
    if separable {
        constants.push(("theta0".into(), theta0));
    }
    constants.push(("xi_beta".into(), spec.xi_beta));

    let mut splits = Vec::with_capacity(3);
    for (s, &n) in sizes.iter().enumerate() {
        let mut rng = split_rng(spec.seed, s);
        let mut rows = Rows::new();
        for _ in 0..n {
            let z = normals(&mut rng, 6);
            let c = xi6(&z, spec.xi_beta);
            let a: Vec<f64> = (0..SIMPLE_TREATMENTS)
                .map(|_| sample_treatment_inverse_cdf(c, open_unit(&mut rng)))
                .collect();
            let coupling = if separable { theta0 } else { c };
            let noise = spec.noise_scale * standard_normal(&mut rng);
            let y = quad_main(&a, &theta) - coupling * pairwise(&a) + c + noise;
            let total: f64 = a.iter().sum();
            for (j, aj) in a.iter().enumerate() {
                rows.effects.push(2.0 * theta[j] * aj - coupling * (total - aj));
            }
            rows.a.extend_from_slice(&a);
            rows.y.push(y);
            rows.z.extend_from_slice(&z);
        }
        splits.push(rows.into_dataset(n, SIMPLE_TREATMENTS, 0, 6, None)?);
    }
    Ok(three(splits, constants))
}

/// Draw units until both arms hold their quota; units of a full arm are
/// discarded.
fn balanced_units(
    rng: &mut StreamRng,
    n: usize,
    mut draw: impl FnMut(&mut StreamRng) -> (f64, Vec<f64>),
) -> Vec<(f64, Vec<f64>)> {
    let treated_quota = n / 2;
    let control_quota = n - treated_quota;
    let (mut t, mut c) = (0, 0);
    let mut out = Vec::with_capacity(n);
    while t < treated_quota || c < control_quota {
        let (a, payload) = draw(rng);
        if a == 1.0 && t < treated_quota {
            t += 1;
            out.push((a, payload));
        } else if a == 0.0 && c < control_quota {
            c += 1;
            out.push((a, payload));
        }
    }
    out
}

fn gen_proxy_sim(spec: &DgpSpec, sizes: [usize; 3]) -> Result<GeneratedData> {
    let noise_scale = spec.noise_scale;
    let constants = vec![
        ("tau".into(), 3.0),
        ("sigma_y".into(), 0.25),
        ("effect_centering".into(), PROXY_SIM_CENTERING),
    ];
    let mut splits = Vec::with_capacity(3);
    for (s, &n) in sizes.iter().enumerate() {
        let mut rng = split_rng(spec.seed, s);
        // payload layout: z (5), x (100), y0 noise (1)
        let units = balanced_units(&mut rng, n, |rng| {
            let z = normals(rng, 5);
            let mean = z.iter().sum::<f64>() / 5.0;
            let gamma = truncated_normal(rng, mean, -10.0, 10.0);
            let mut payload = z.clone();
            for _ in 0..PROXY_SIM_DIM {
                let r = truncated_normal(rng, mean, -10.0, 10.0);
                payload.push((gamma + r) / core::f64::consts::SQRT_2);
            }
            let a = bernoulli(rng, proxy_sim_propensity(&z));
            payload.push(noise_scale * 0.25 * standard_normal(rng));
            (a, payload)
        });
        let mut rows = Rows::new();
        for (a, p) in units {
            let z = &p[..5];
            let effect = 3.0 + proxy_sim_eta(z);
            rows.a.push(a);
            rows.y.push(proxy_sim_baseline(z) + effect * a + p[5 + PROXY_SIM_DIM]);
            rows.x.extend_from_slice(&p[5..5 + PROXY_SIM_DIM]);
            rows.z.extend_from_slice(z);
            rows.cate.push(effect);
        }
        splits.push(rows.into_dataset(n, 1, PROXY_SIM_DIM, 5, Some(3.0))?);
    }
    Ok(three(splits, constants))
}

fn gen_dag_misspec(spec: &DgpSpec, sizes: [usize; 3]) -> Result<GeneratedData> {
    let treatment_leak = spec.kind == DgpKind::MisspecTreatmentProxy;
    let outcome_leak = spec.kind == DgpKind::MisspecOutcomeProxy;
    let x_sd = math::sqrt(0.5) * spec.noise_scale;
    let y_sd = 0.5 * spec.noise_scale;
    let mut constants = vec![("true_ate".into(), 3.0)];
    if outcome_leak {
        constants.push(("outcome_proxy_weight".into(), spec.outcome_proxy_weight));
    }
    let mut splits = Vec::with_capacity(3);
    for (s, &n) in sizes.iter().enumerate() {
        let mut rng = split_rng(spec.seed, s);
        let mut rows = Rows::new();
        for _ in 0..n {
            let z = normals(&mut rng, 5);
            let h1 = misspec_h1(&z);
            let x: Vec<f64> = (0..MISSPEC_DIM).map(|_| h1 + x_sd * standard_normal(&mut rng)).collect();
            let g = mean_abs(&x);
            let score = misspec_h2(&z) + if treatment_leak { 0.5 * g } else { 0.0 };
            let a = bernoulli(&mut rng, expit(score));
            let effect = misspec_effect(&z);
            let mut y = misspec_baseline(&z) + a * effect + y_sd * standard_normal(&mut rng);
            if outcome_leak {
                y += spec.outcome_proxy_weight * g;
            }
            rows.a.push(a);
            rows.y.push(y);
            rows.x.extend_from_slice(&x);
            rows.z.extend_from_slice(&z);
            rows.cate.push(effect);
        }
        splits.push(rows.into_dataset(n, 1, MISSPEC_DIM, 5, Some(3.0))?);
    }
    Ok(three(splits, constants))
}

fn gen_overlap_degenerate(spec: &DgpSpec, sizes: [usize; 3]) -> Result<GeneratedData> {
    let x_sd = 0.5 * spec.noise_scale;
    let y_sd = 0.5 * spec.noise_scale;
    let constants = vec![("true_ate".into(), 3.0), ("propensity_slope".into(), 5.0)];
    let mut splits = Vec::with_capacity(3);
    for (s, &n) in sizes.iter().enumerate() {
        let mut rng = split_rng(spec.seed, s);
        let mut rows = Rows::new();
        for _ in 0..n {
            let z = normals(&mut rng, 5);
            let x: Vec<f64> = (0..OVERLAP_DIM)
                .map(|j| z[j % 5] + x_sd * standard_normal(&mut rng))
                .collect();
            let a = bernoulli(&mut rng, expit(5.0 * z[0]));
            let y = z[0] + 3.0 * a + y_sd * standard_normal(&mut rng);
            rows.a.push(a);
            rows.y.push(y);
            rows.x.extend_from_slice(&x);
            rows.z.extend_from_slice(&z);
            rows.cate.push(3.0);
        }
        splits.push(rows.into_dataset(n, 1, OVERLAP_DIM, 5, Some(3.0))?);
    }
    Ok(three(splits, constants))
}
