//! Finite-difference oracles shared by the gradient tests and the
//! acceptance suite. Each `*_case` draws a random problem, compares the
//! analytic gradient with central differences and returns the relative
//! error `|g - fd| / max(|g|, |fd|)` over the whole gradient vector.

#![allow(dead_code)]

use ci_stonet_core::model::{
    build_model, joint_log_density, latent_conditional_mean, latent_log_density_grad, log_density_terms,
    param_log_density_grads, vanilla_grads, DagVariant, Dataset, ModuleId, StoNetConfig, StoNetModel, TreatmentKind,
};
use ci_stonet_core::nn::{init_params, mlp_backward, mlp_forward, Activation, MlpParams, MlpSpec, OutputActivation};
use ci_stonet_core::prior::{log_prior, log_prior_grad, PriorHyper};
use ci_stonet_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central(x: &mut [f64], i: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let up = f(x);
    x[i] = x0 - h;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * h)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len()).map(|i| central(&mut x, i, h, &mut f)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn smooth_activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random::<bool>() {
        Activation::Tanh
    } else {
        Activation::Sigmoid
    }
}

fn hidden_widths(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(0..3);
    (0..depth).map(|_| rng.random_range(1..6)).collect()
}

/// Random small model of `variant` with matching data and imputation.
pub fn random_problem(rng: &mut ChaCha8Rng, variant: DagVariant) -> (StoNetModel, Dataset, Matrix) {
    let treatment = if variant.uses_proxy() && rng.random::<bool>() {
        TreatmentKind::Binary
    } else {
        TreatmentKind::Continuous
    };
    let d_a = if treatment == TreatmentKind::Binary { 1 } else { rng.random_range(1..4) };
    let d_x = if variant.uses_proxy() { rng.random_range(1..5) } else { 0 };
    let d_z = rng.random_range(1..5);
    let cfg = StoNetConfig {
        variant,
        treatment,
        d_a,
        d_y: rng.random_range(1..3),
        d_x,
        d_z,
        latent_hidden: hidden_widths(rng),
        treatment_hidden: hidden_widths(rng),
        outcome_hidden: hidden_widths(rng),
        hidden_activation: smooth_activation(rng),
        sigma_z2: log_uniform(rng, 0.05, 2.0),
        sigma_a2: log_uniform(rng, 0.05, 2.0),
        sigma_y2: log_uniform(rng, 0.05, 2.0),
        init_scale: 1.0,
        seed: rng.random(),
    };
    let model = build_model(&cfg).unwrap();
    let n = rng.random_range(1..6);
    let a = match treatment {
        TreatmentKind::Binary => {
            Matrix::from_vec(n, 1, (0..n).map(|_| f64::from(rng.random::<bool>() as u8)).collect()).unwrap()
        }
        TreatmentKind::Continuous => normal_matrix(rng, n, d_a),
    };
    let y = normal_matrix(rng, n, cfg.d_y);
    let x = (d_x > 0).then(|| normal_matrix(rng, n, d_x));
    let data = Dataset::new(a, y, x).unwrap();
    let z = normal_matrix(rng, n, d_z);
    (model, data, z)
}

/// Input and parameter gradients of `sum(c * mlp(x))`.
pub fn mlp_backward_case(rng: &mut ChaCha8Rng) -> f64 {
    let mut widths = vec![rng.random_range(1..5)];
    widths.extend(hidden_widths(rng));
    widths.push(rng.random_range(1..4));
    let out_act = if rng.random::<bool>() { OutputActivation::Sigmoid } else { OutputActivation::Identity };
    let spec = MlpSpec::new(widths, smooth_activation(rng), out_act).unwrap();
    let params = init_params(&spec, rng.random(), 1.0).unwrap();
    let n = rng.random_range(1..5);
    let x = normal_matrix(rng, n, spec.input_dim());
    let c = normal_matrix(rng, n, spec.output_dim());
    let objective = |p: &MlpParams, x: &Matrix| -> f64 {
        let (out, _) = mlp_forward(&spec, p, x).unwrap();
        out.as_slice().iter().zip(c.as_slice()).map(|(o, w)| o * w).sum()
    };
    let (_, trace) = mlp_forward(&spec, &params, &x).unwrap();
    let (pg, xg) = mlp_backward(&spec, &params, &trace, &c).unwrap();
    let flat = params.to_flat();
    let fd_p = numeric_grad(&flat, STEP, |f| objective(&MlpParams::from_flat(&spec, f).unwrap(), &x));
    let fd_x = numeric_grad(x.as_slice(), STEP, |v| {
        objective(&params, &Matrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap())
    });
    rel_err(&pg.to_flat(), &fd_p).max(rel_err(xg.as_slice(), &fd_x))
}

/// Gradient of the joint log density with respect to `Z`.
pub fn latent_grad_case(rng: &mut ChaCha8Rng, variant: DagVariant) -> f64 {
    let (model, data, z) = random_problem(rng, variant);
    let g = latent_log_density_grad(&model, &data, &z).unwrap();
    let fd = numeric_grad(z.as_slice(), STEP, |v| {
        let zz = Matrix::from_vec(z.rows(), z.cols(), v.to_vec()).unwrap();
        joint_log_density(&model, &data, &zz).unwrap()
    });
    rel_err(g.as_slice(), &fd)
}

fn with_params(model: &StoNetModel, id: ModuleId, flat: &[f64]) -> StoNetModel {
    let mut m = model.clone();
    let module = m.module_mut(id).unwrap();
    module.params = MlpParams::from_flat(&module.spec, flat).unwrap();
    m
}

fn modules(model: &StoNetModel) -> Vec<ModuleId> {
    [ModuleId::Latent, ModuleId::Treatment, ModuleId::Outcome]
        .into_iter()
        .filter(|&id| model.module(id).is_some())
        .collect()
}

/// Gradient of the joint log density with respect to every module's
/// parameters, at a fixed imputation.
pub fn param_grad_case(rng: &mut ChaCha8Rng, variant: DagVariant) -> f64 {
    let (model, data, z) = random_problem(rng, variant);
    let grads = param_log_density_grads(&model, &data, &z).unwrap();
    modules(&model)
        .into_iter()
        .map(|id| {
            let flat = model.module(id).unwrap().params.to_flat();
            let fd = numeric_grad(&flat, STEP, |f| {
                joint_log_density(&with_params(&model, id, f), &data, &z).unwrap()
            });
            rel_err(&grads.get(id).unwrap().to_flat(), &fd)
        })
        .fold(0.0, f64::max)
}

/// Gradient of the deterministic network (`Z = mu_1`) log likelihood.
pub fn vanilla_grad_case(rng: &mut ChaCha8Rng, variant: DagVariant) -> f64 {
    let (model, data, _) = random_problem(rng, variant);
    let (grads, _) = vanilla_grads(&model, &data).unwrap();
    let objective = |m: &StoNetModel| -> f64 {
        let mu = latent_conditional_mean(m, &data).unwrap();
        log_density_terms(m, &data, &mu).unwrap().total()
    };
    modules(&model)
        .into_iter()
        .map(|id| {
            let flat = model.module(id).unwrap().params.to_flat();
            let fd = numeric_grad(&flat, STEP, |f| objective(&with_params(&model, id, f)));
            rel_err(&grads.get(id).unwrap().to_flat(), &fd)
        })
        .fold(0.0, f64::max)
}

/// Spike-and-slab log prior gradient over a vector spanning both components.
pub fn prior_grad_case(rng: &mut ChaCha8Rng) -> f64 {
    let s0 = log_uniform(rng, 1e-4, 1e-2);
    let s1 = log_uniform(rng, 0.05, 1.0);
    let hyper = PriorHyper::from_variances(log_uniform(rng, 1e-6, 0.5), s0, s1).unwrap();
    let theta: Vec<f64> = (0..20)
        .map(|k| normal(rng) * if k % 2 == 0 { s0.sqrt() } else { s1.sqrt() } * 3.0)
        .collect();
    let g = log_prior_grad(&theta, &hyper).unwrap();
    let h = 1e-3 * s0.sqrt();
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut t = theta.clone();
            t[i] += h;
            let up = log_prior(&t[i..=i], &hyper).unwrap();
            t[i] -= 2.0 * h;
            let down = log_prior(&t[i..=i], &hyper).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect();
    rel_err(&g, &fd)
}

pub const VARIANTS: [DagVariant; 4] = [
    DagVariant::SimpleConfounding,
    DagVariant::BasicProxy,
    DagVariant::OutcomeProxy,
    DagVariant::TreatmentProxy,
];

/// `(name, worst relative error)` for every oracle family over `cases`
/// random draws each.
pub fn gradient_suite(seed: u64, cases: usize) -> Vec<(String, f64)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let worst = |f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64, rng: &mut ChaCha8Rng| -> f64 {
        (0..cases).map(|_| f(rng)).fold(0.0, f64::max)
    };
    out.push(("mlp backward".to_string(), worst(&mut mlp_backward_case, &mut rng)));
    for v in VARIANTS {
        out.push((format!("latent gradient, {}", v.name()), worst(&mut |r| latent_grad_case(r, v), &mut rng)));
        out.push((format!("parameter gradient, {}", v.name()), worst(&mut |r| param_grad_case(r, v), &mut rng)));
        out.push((format!("vanilla gradient, {}", v.name()), worst(&mut |r| vanilla_grad_case(r, v), &mut rng)));
    }
    out.push(("prior gradient".to_string(), worst(&mut prior_grad_case, &mut rng)));
    out
}

/// Sampler output against the exact Gaussian posterior of a linear model.
#[derive(Clone, Debug)]
pub struct ConjugateReport {
    /// Average over units and draws of `z - exact mean`, per coordinate.
    pub mean_error: [f64; 2],
    /// Batch-means Monte Carlo standard error of `mean_error`.
    pub mean_se: [f64; 2],
    /// Average over units of the per-chain variance, per coordinate.
    pub var_sampled: [f64; 2],
    pub var_exact: [f64; 2],
    pub steps: usize,
}

impl ConjugateReport {
    pub fn passes(&self) -> bool {
        (0..2).all(|j| {
            self.mean_error[j].abs() <= 3.0 * self.mean_se[j]
                && (self.var_sampled[j] / self.var_exact[j] - 1.0).abs() <= 0.10
        })
    }
}

/// Linear-Gaussian simple-confounding model (`d_A = 3`, `d_z = 2`, no
/// hidden layers) on `n` units; SGHMC chains for every unit run `steps`
/// moves after `burn_in`, with parameters held fixed.
pub fn conjugate_check(seed: u64, n: usize, burn_in: usize, steps: usize) -> ConjugateReport {
    use ci_stonet_core::sghmc::{impute_latent_step, ImputeStep, LatentState};
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sz2, sy2) = (1.0, 0.25);
    let cfg = StoNetConfig {
        latent_hidden: vec![],
        outcome_hidden: vec![],
        sigma_z2: sz2,
        sigma_y2: sy2,
        seed,
        ..StoNetConfig::simple_confounding(3, 2)
    };
    let mut model = build_model(&cfg).unwrap();
    let lw = [[0.8, -0.3, 0.5], [0.2, 0.6, -0.4]];
    let lb = [0.1, -0.2];
    for (j, row) in lw.iter().enumerate() {
        model.latent.params.layers[0].weights.row_mut(j).copy_from_slice(row);
    }
    model.latent.params.layers[0].bias = lb.to_vec();
    // Outcome input order is (Z, A).
    let wz = [1.0, -0.5];
    let wa = [0.3, 0.2, -0.1];
    let ob = 0.05;
    let ow: Vec<f64> = wz.iter().chain(&wa).copied().collect();
    model.outcome.params.layers[0].weights.row_mut(0).copy_from_slice(&ow);
    model.outcome.params.layers[0].bias = vec![ob];

    let a = normal_matrix(&mut rng, n, 3);
    let mut y = Matrix::zeros(n, 1);
    let mut mu = vec![[0.0; 2]; n];
    for (i, mu_i) in mu.iter_mut().enumerate() {
        let ai = a.row(i);
        for j in 0..2 {
            mu_i[j] = lb[j] + (0..3).map(|k| lw[j][k] * ai[k]).sum::<f64>();
        }
        let z: Vec<f64> = (0..2).map(|j| mu_i[j] + sz2.sqrt() * normal(&mut rng)).collect();
        let lin = ob + wz[0] * z[0] + wz[1] * z[1] + (0..3).map(|k| wa[k] * ai[k]).sum::<f64>();
        y.set(i, 0, lin + sy2.sqrt() * normal(&mut rng));
    }
    let data = Dataset::new(a.clone(), y.clone(), None).unwrap();

    // Exact posterior: precision I / sz2 + wz wz^T / sy2.
    let p = [
        [1.0 / sz2 + wz[0] * wz[0] / sy2, wz[0] * wz[1] / sy2],
        [wz[0] * wz[1] / sy2, 1.0 / sz2 + wz[1] * wz[1] / sy2],
    ];
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let cov = [[p[1][1] / det, -p[0][1] / det], [-p[1][0] / det, p[0][0] / det]];
    let exact_mean: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let ai = a.row(i);
            let resid = y.get(i, 0) - ob - (0..3).map(|k| wa[k] * ai[k]).sum::<f64>();
            let rhs = [mu[i][0] / sz2 + wz[0] * resid / sy2, mu[i][1] / sz2 + wz[1] * resid / sy2];
            [cov[0][0] * rhs[0] + cov[0][1] * rhs[1], cov[1][0] * rhs[0] + cov[1][1] * rhs[1]]
        })
        .collect();

    let mut state = LatentState::at_mean(&model, &data).unwrap();
    let step = ImputeStep { eps: 0.05, eta: 1.0, leapfrog: true };
    for _ in 0..burn_in {
        impute_latent_step(&mut state, &model, &data, None, step, &mut rng).unwrap();
    }
    let mut err_series = [Vec::with_capacity(steps), Vec::with_capacity(steps)];
    let mut sum = vec![[0.0; 2]; n];
    let mut sum_sq = vec![[0.0; 2]; n];
    for _ in 0..steps {
        impute_latent_step(&mut state, &model, &data, None, step, &mut rng).unwrap();
        let mut e = [0.0; 2];
        for i in 0..n {
            for j in 0..2 {
                let z = state.z.get(i, j);
                e[j] += z - exact_mean[i][j];
                sum[i][j] += z;
                sum_sq[i][j] += z * z;
            }
        }
        for j in 0..2 {
            err_series[j].push(e[j] / n as f64);
        }
    }
    let batches = 50;
    let per = steps / batches;
    let mut report = ConjugateReport {
        mean_error: [0.0; 2],
        mean_se: [0.0; 2],
        var_sampled: [0.0; 2],
        var_exact: [cov[0][0], cov[1][1]],
        steps,
    };
    for j in 0..2 {
        let s = &err_series[j];
        report.mean_error[j] = s.iter().sum::<f64>() / s.len() as f64;
        let means: Vec<f64> = s.chunks(per).take(batches).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let m = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (batches - 1) as f64;
        report.mean_se[j] = (var / batches as f64).sqrt();
        let t = steps as f64;
        report.var_sampled[j] =
            (0..n).map(|i| sum_sq[i][j] / t - (sum[i][j] / t).powi(2)).sum::<f64>() / n as f64 * t / (t - 1.0);
    }
    report
}

/// Tilted density `expit(c a)` on `[-1, 1]`, integrated by composite
/// Simpson's rule; independent of the closed form in the crate.
pub fn tilted_cdf_quadrature(c: f64, a: f64) -> f64 {
    let f = |t: f64| 1.0 / (1.0 + (-c * t).exp());
    let simpson = |lo: f64, hi: f64| {
        let m = 2000;
        let h = (hi - lo) / m as f64;
        let mut s = f(lo) + f(hi);
        for k in 1..m {
            s += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    if a <= -1.0 {
        return 0.0;
    }
    simpson(-1.0, a.min(1.0)) / simpson(-1.0, 1.0)
}

/// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Root of `cdf(a) = u` on `[-1, 1]` by bisection.
pub fn bisect_inverse(u: f64, cdf: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
