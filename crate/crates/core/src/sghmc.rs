//! Alternating SGHMC imputation and prior-regularised parameter ascent.
//!
//! Each iteration first moves the latent matrix `Z` with one or more
//! underdamped Langevin (SGHMC) steps targeting `pi(Z | data, theta)`, then
//! takes a gradient step on every module's own conditional log-likelihood
//! plus the log prior. Training runs in three stages: a deterministic
//! pretrain with `Z = mu_1(input)`, the main alternation with decaying
//! rates, and an optional finetune after pruning.

use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::model::{
    latent_conditional_mean, latent_grad_with_mean, param_grads_with_trace, vanilla_grads, Dataset,
    LogDensityTerms, ModuleGrads, ModuleId, StoNetModel, TreatmentKind,
};
use crate::nn::{mlp_forward, MlpParams};
use crate::prior::{log_prior_grad_scalar, prune_mask, PriorHyper};
use crate::rng::standard_normal;

/// Effective per-sample learning rate used by [`TrainSchedule::tuned`].
pub const TUNED_LR: f64 = 0.02;

const MODULES: [ModuleId; 3] = [ModuleId::Latent, ModuleId::Treatment, ModuleId::Outcome];

/// Current imputations and their momenta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Matrix,
    pub v: Matrix,
}

impl LatentState {
    /// `Z = mu_1(input)` with zero momentum.
    pub fn at_mean(model: &StoNetModel, data: &Dataset) -> Result<Self> {
        let z = latent_conditional_mean(model, data)?;
        let v = Matrix::zeros(z.rows(), z.cols());
        Ok(LatentState { z, v })
    }

    fn check(&self, n: usize, d_z: usize) -> Result<()> {
        self.z.check_shape(n, d_z, "latent state Z")?;
        self.v.check_shape(n, d_z, "latent state momentum")?;
        Ok(())
    }

    fn select_rows(&self, rows: &[usize]) -> LatentState {
        LatentState {
            z: self.z.select_rows(rows),
            v: self.v.select_rows(rows),
        }
    }

    fn write_rows(&mut self, rows: &[usize], part: &LatentState) {
        for (k, &i) in rows.iter().enumerate() {
            self.z.row_mut(i).copy_from_slice(part.z.row(k));
            self.v.row_mut(i).copy_from_slice(part.v.row(k));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decay {
    /// `base * c_e / (c_e + k^alpha)`
    Harmonic { alpha: f64, c_e: f64 },
    /// `r_k = r_{k-1} / (1 + r_{k-1} * k^alpha)`, `r_0 = base`
    Empirical { alpha: f64 },
}

impl Decay {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Decay::Harmonic { alpha, c_e } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::Config(format!(
                        "harmonic decay exponent must lie in (0, 1), got {alpha}"
                    )));
                }
                if !(c_e > 0.0 && c_e.is_finite()) {
                    return Err(Error::Config(format!("harmonic decay offset must be positive, got {c_e}")));
                }
            }
            Decay::Empirical { alpha } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::Config(format!(
                        "empirical decay exponent must be non-negative, got {alpha}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rate at decay index `k`.
pub fn lr_at(k: usize, base: f64, decay: &Decay) -> f64 {
    match *decay {
        Decay::Harmonic { alpha, c_e } => base * c_e / (c_e + math::powf(k as f64, alpha)),
        Decay::Empirical { alpha } => {
            let mut r = base;
            for j in 1..=k {
                r = empirical_next(r, j, alpha);
            }
            r
        }
    }
}

fn empirical_next(r: f64, k: usize, alpha: f64) -> f64 {
    r / (1.0 + r * math::powf(k as f64, alpha))
}

/// Walks a decay schedule one index at a time.
#[derive(Clone, Debug)]
struct RateCursor {
    base: f64,
    decay: Decay,
    k: usize,
    current: f64,
}

impl RateCursor {
    fn new(base: f64, decay: Decay) -> Self {
        RateCursor { base, decay, k: 0, current: base }
    }

    fn rate(&self) -> f64 {
        self.current
    }

    fn advance(&mut self) {
        self.k += 1;
        self.current = match self.decay {
            Decay::Harmonic { .. } => lr_at(self.k, self.base, &self.decay),
            Decay::Empirical { alpha } => empirical_next(self.current, self.k, alpha),
        };
    }
}

/// Bayesian estimate of the latent noise variance from imputation residuals
/// under an inverse-gamma(`alpha`, `beta`) prior.
pub fn update_sigma_z(z: &Matrix, mu1: &Matrix, alpha: f64, beta: f64) -> Result<f64> {
    if z.shape() != mu1.shape() {
        return Err(Error::Dimension(format!(
            "Z is {:?} but the latent means are {:?}",
            z.shape(),
            mu1.shape()
        )));
    }
    let n = z.as_slice().len();
    if n == 0 {
        return Err(Error::Config("no latent residuals to estimate sigma_z2 from".into()));
    }
    if alpha.is_nan() || alpha < 1.0 || beta.is_nan() || beta < 0.0 {
        return Err(Error::Config(format!(
            "inverse-gamma prior needs alpha >= 1 and beta >= 0 (got {alpha}, {beta})"
        )));
    }
    let denom = n as f64 / 2.0 + alpha - 1.0;
    if denom <= 0.0 {
        return Err(Error::Config("sigma_z2 estimate has a non-positive denominator".into()));
    }
    let ss: f64 = z
        .as_slice()
        .iter()
        .zip(mu1.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((beta + 0.5 * ss) / denom)
}

/// Per-module parameter rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleRates {
    pub latent: f64,
    pub treatment: f64,
    pub outcome: f64,
}

impl ModuleRates {
    pub fn uniform(r: f64) -> Self {
        ModuleRates { latent: r, treatment: r, outcome: r }
    }

    pub fn get(&self, id: ModuleId) -> f64 {
        match id {
            ModuleId::Latent => self.latent,
            ModuleId::Treatment => self.treatment,
            ModuleId::Outcome => self.outcome,
        }
    }

    /// Rates under which each module moves by `lr` per unit of its
    /// per-sample loss: the Gaussian heads are rescaled by their variance and
    /// everything by `1/n`, so `lr` does not depend on the noise level.
    pub fn effective(lr: f64, model: &StoNetModel, n: usize) -> Self {
        let n = n.max(1) as f64;
        let treatment = match model.treatment {
            TreatmentKind::Binary => lr / n,
            TreatmentKind::Continuous => lr * model.sigma_a2 / n,
        };
        ModuleRates { latent: lr * model.sigma_z2 / n, treatment, outcome: lr * model.sigma_y2 / n }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ModuleRates {
            latent: f(self.latent),
            treatment: f(self.treatment),
            outcome: f(self.outcome),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEpochs {
    pub pretrain: usize,
    pub train: usize,
    pub finetune: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: StageEpochs,
    /// Initial imputation step size.
    pub eps0: f64,
    /// Initial parameter rates.
    pub gamma0: ModuleRates,
    /// SGHMC friction.
    pub eta: f64,
    pub eps_decay: Decay,
    pub gamma_decay: Decay,
    pub hmc_steps_per_iter: usize,
    /// Rows per iteration; `None` uses the full data.
    pub minibatch: Option<usize>,
    /// Move `Z` with the freshly updated momentum instead of the old one.
    pub leapfrog: bool,
    /// Multiplier on both rates during finetuning.
    pub finetune_scale: f64,
    /// Re-estimate `sigma_z2` after every train/finetune epoch.
    pub sigma_z_each_epoch: bool,
    /// Re-estimate `sigma_z2` once after training.
    pub sigma_z_final: bool,
    /// Inverse-gamma prior `(alpha, beta)` for the `sigma_z2` estimate.
    pub sigma_z_prior: (f64, f64),
}

/// The published constants. On the bundled simulators these rates diverge
/// or stall; see [`TrainSchedule::tuned`].
impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: StageEpochs { pretrain: 100, train: 500, finetune: 100 },
            eps0: 1e-3,
            gamma0: ModuleRates { latent: 5e-7, treatment: 5e-6, outcome: 5e-6 },
            eta: 1.0,
            eps_decay: Decay::Empirical { alpha: 0.95 },
            gamma_decay: Decay::Empirical { alpha: 0.7 },
            hmc_steps_per_iter: 1,
            minibatch: None,
            leapfrog: false,
            finetune_scale: 0.1,
            sigma_z_each_epoch: false,
            sigma_z_final: true,
            sigma_z_prior: (1.0, 1.0),
        }
    }
}

impl TrainSchedule {
    /// Settings that train reliably on the bundled simulators: rates from
    /// [`ModuleRates::effective`] with `lr = 0.02`, minibatches of 100,
    /// leapfrog ordering and a small imputation step.
    pub fn tuned(model: &StoNetModel, n: usize) -> Self {
        TrainSchedule {
            epochs: StageEpochs { pretrain: 100, train: 100, finetune: 50 },
            eps0: 1e-5,
            gamma0: ModuleRates::effective(TUNED_LR, model, n),
            eps_decay: Decay::Empirical { alpha: 0.8 },
            gamma_decay: Decay::Empirical { alpha: 0.6 },
            minibatch: Some(100),
            leapfrog: true,
            ..TrainSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.eps0) || !pos(self.eta) {
            return Err(Error::Config(format!(
                "imputation rate and friction must be positive (eps0 = {}, eta = {})",
                self.eps0, self.eta
            )));
        }
        let g = self.gamma0;
        if !pos(g.latent) || !pos(g.treatment) || !pos(g.outcome) {
            return Err(Error::Config(format!("parameter rates must be positive, got {g:?}")));
        }
        if self.hmc_steps_per_iter == 0 {
            return Err(Error::Config("hmc_steps_per_iter must be at least 1".into()));
        }
        if self.minibatch == Some(0) {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        if !pos(self.finetune_scale) {
            return Err(Error::Config("finetune rate scale must be positive".into()));
        }
        self.eps_decay.validate()?;
        self.gamma_decay.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Train,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Data log density summed over the epoch's batches.
    pub log_density: f64,
    /// Root-mean-square over batches of each module's rescaled likelihood
    /// gradient norm (`[latent, treatment, outcome]`).
    pub grad_norms: [f64; 3],
    pub sigma_z2: f64,
    pub pruned_frac: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// Step sizes for one imputation move.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImputeStep {
    pub eps: f64,
    pub eta: f64,
    pub leapfrog: bool,
}

/// One SGHMC move of `Z` for the listed rows (all rows when `rows` is `None`).
pub fn impute_latent_step<R: Rng + ?Sized>(
    state: &mut LatentState,
    model: &StoNetModel,
    data: &Dataset,
    rows: Option<&[usize]>,
    step: ImputeStep,
    rng: &mut R,
) -> Result<()> {
    state.check(data.n(), model.d_z)?;
    match rows {
        None => {
            let mu1 = latent_conditional_mean(model, data)?;
            sghmc_move(state, model, data, &mu1, step, rng)
        }
        Some(rows) => {
            let batch = data.select_rows(rows);
            let mut part = state.select_rows(rows);
            let mu1 = latent_conditional_mean(model, &batch)?;
            sghmc_move(&mut part, model, &batch, &mu1, step, rng)?;
            state.write_rows(rows, &part);
            Ok(())
        }
    }
}

fn sghmc_move<R: Rng + ?Sized>(
    state: &mut LatentState,
    model: &StoNetModel,
    data: &Dataset,
    mu1: &Matrix,
    step: ImputeStep,
    rng: &mut R,
) -> Result<()> {
    let ImputeStep { eps, eta, leapfrog } = step;
    if eps.is_nan() || eps < 0.0 || eta.is_nan() || eta < 0.0 {
        return Err(Error::Config(format!(
            "imputation step needs eps >= 0 and eta >= 0 (got {eps}, {eta})"
        )));
    }
    if eps == 0.0 {
        return Ok(());
    }
    let g = latent_grad_with_mean(model, data, &state.z, mu1)?;
    let decay = 1.0 - eps * eta;
    let noise = math::sqrt(2.0 * eps * eta);
    for ((z, v), &gv) in state
        .z
        .as_mut_slice()
        .iter_mut()
        .zip(state.v.as_mut_slice())
        .zip(g.as_slice())
    {
        let e = if noise > 0.0 { standard_normal(rng) } else { 0.0 };
        let v_new = decay * *v + eps * gv + noise * e;
        *z += eps * if leapfrog { v_new } else { *v };
        *v = v_new;
    }
    if !state.z.is_finite() || !state.v.is_finite() {
        return Err(Error::Numeric(format!(
            "latent imputation diverged (eps = {eps}, eta = {eta}); the imputation rate is too large"
        )));
    }
    Ok(())
}

/// Ascend `scale * grad + grad log prior` on every module; pruned entries
/// are held at zero.
fn apply_param_grads(
    model: &mut StoNetModel,
    grads: &ModuleGrads,
    rates: &ModuleRates,
    scale: f64,
    prior: Option<&PriorHyper>,
) -> Result<()> {
    for id in MODULES {
        let (Some(module), Some(g)) = (model.module_mut(id), grads.get(id)) else {
            continue;
        };
        let rate = rates.get(id);
        let flat_g = g.to_flat();
        let keep = module.keep.clone();
        module.params.for_each_mut(|idx, theta| {
            if keep.as_ref().is_some_and(|k| !k[idx]) {
                *theta = 0.0;
                return;
            }
            let prior_g = prior.map_or(0.0, |h| log_prior_grad_scalar(*theta, h));
            *theta += rate * (scale * flat_g[idx] + prior_g);
        });
        if !module.params.is_finite() {
            return Err(Error::Numeric(format!(
                "{id:?} parameters became non-finite (rate = {rate}); the parameter rate is too large"
            )));
        }
    }
    Ok(())
}

/// One parameter update at imputation `z` on `batch`; gradients are
/// rescaled by `n_total / batch size`. Returns the log density at the
/// pre-update parameters.
pub fn update_params_step(
    model: &mut StoNetModel,
    batch: &Dataset,
    z: &Matrix,
    rates: &ModuleRates,
    n_total: usize,
    prior: Option<&PriorHyper>,
) -> Result<LogDensityTerms> {
    model.check_data(batch)?;
    z.check_shape(batch.n(), model.d_z, "latent matrix Z")?;
    let input = model.latent_input(batch)?;
    let (mu1, trace) = mlp_forward(&model.latent.spec, &model.latent.params, input)?;
    let (grads, terms) = param_grads_with_trace(model, batch, z, &mu1, &trace)?;
    let scale = n_total as f64 / batch.n() as f64;
    apply_param_grads(model, &grads, rates, scale, prior)?;
    Ok(terms)
}

fn grad_norms(grads: &ModuleGrads, scale: f64) -> [f64; 3] {
    let n = |p: Option<&MlpParams>| p.map_or(0.0, |p| scale * p.norm());
    [
        n(Some(&grads.latent)),
        n(grads.treatment.as_ref()),
        n(Some(&grads.outcome)),
    ]
}

/// Trained model, per-epoch log and the final latent state.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: StoNetModel,
    pub log: TrainLog,
    pub state: LatentState,
}

fn batches<R: Rng + ?Sized>(n: usize, size: Option<usize>, rng: &mut R) -> Option<Vec<Vec<usize>>> {
    let m = size?;
    if m >= n {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Some(idx.chunks(m).map(<[usize]>::to_vec).collect())
}

fn pruned_fraction(model: &StoNetModel) -> f64 {
    let pruned: usize = MODULES
        .iter()
        .filter_map(|&id| model.module(id))
        .map(|m| m.pruned_count())
        .sum();
    pruned as f64 / model.param_count() as f64
}

struct EpochAcc {
    log_density: f64,
    sq_norms: [f64; 3],
    batches: usize,
}

impl EpochAcc {
    fn new() -> Self {
        EpochAcc { log_density: 0.0, sq_norms: [0.0; 3], batches: 0 }
    }

    fn add(&mut self, terms: &LogDensityTerms, norms: [f64; 3]) {
        self.log_density += terms.total();
        for (a, b) in self.sq_norms.iter_mut().zip(norms) {
            *a += b * b;
        }
        self.batches += 1;
    }

    fn norms(&self) -> [f64; 3] {
        let b = self.batches.max(1) as f64;
        self.sq_norms.map(|s| math::sqrt(s / b))
    }
}

/// Run all three stages. `clock` returns elapsed seconds for the log; pass
/// `|| 0.0` when wall time is irrelevant.
pub fn train<R: Rng + ?Sized>(
    model: StoNetModel,
    data: &Dataset,
    schedule: &TrainSchedule,
    prior: Option<&PriorHyper>,
    rng: &mut R,
    clock: &dyn Fn() -> f64,
) -> Result<TrainOutput> {
    let mut model = model;
    model.validate()?;
    model.check_data(data)?;
    schedule.validate()?;
    if let Some(h) = prior {
        h.validate()?;
    }
    let n = data.n();
    let mut log = TrainLog::default();
    let mut epoch = 0;

    for _ in 0..schedule.epochs.pretrain {
        let mut acc = EpochAcc::new();
        let run = |model: &mut StoNetModel, batch: &Dataset, acc: &mut EpochAcc| -> Result<()> {
            let (grads, terms) = vanilla_grads(model, batch)?;
            let scale = n as f64 / batch.n() as f64;
            acc.add(&terms, grad_norms(&grads, scale));
            apply_param_grads(model, &grads, &schedule.gamma0, scale, prior)
        };
        match batches(n, schedule.minibatch, rng) {
            None => run(&mut model, data, &mut acc),
            Some(bs) => bs
                .iter()
                .try_for_each(|rows| run(&mut model, &data.select_rows(rows), &mut acc)),
        }
        .map_err(|e| e.context(&format!("pretrain epoch {epoch}")))?;
        log.records.push(EpochRecord {
            epoch,
            stage: Stage::Pretrain,
            log_density: acc.log_density,
            grad_norms: acc.norms(),
            sigma_z2: model.sigma_z2,
            pruned_frac: pruned_fraction(&model),
            seconds: clock(),
        });
        epoch += 1;
    }

    let mut state = LatentState::at_mean(&model, data)?;
    let mut eps = RateCursor::new(schedule.eps0, schedule.eps_decay);
    let mut gamma = RateCursor::new(1.0, schedule.gamma_decay);
    let gamma_base = schedule.gamma0;
    let stages = [
        (Stage::Train, schedule.epochs.train, 1.0),
        (Stage::Finetune, schedule.epochs.finetune, schedule.finetune_scale),
    ];
    for (stage, count, scale) in stages {
        if stage == Stage::Finetune && count > 0 {
            apply_pruning(&mut model, prior);
        }
        for _ in 0..count {
            let step = ImputeStep {
                eps: eps.rate() * scale,
                eta: schedule.eta,
                leapfrog: schedule.leapfrog,
            };
            let rates = gamma_rates(&gamma_base, &gamma, schedule.gamma_decay, scale);
            let mut acc = EpochAcc::new();
            match batches(n, schedule.minibatch, rng) {
                None => alternate(&mut model, data, &mut state, step, &rates, n, prior, schedule, rng, &mut acc),
                Some(bs) => bs.iter().try_for_each(|rows| {
                    let batch = data.select_rows(rows);
                    let mut part = state.select_rows(rows);
                    alternate(&mut model, &batch, &mut part, step, &rates, n, prior, schedule, rng, &mut acc)?;
                    state.write_rows(rows, &part);
                    Ok(())
                }),
            }
            .map_err(|e| e.context(&format!("{} epoch {epoch}", stage.name())))?;
            if schedule.sigma_z_each_epoch {
                refresh_sigma_z(&mut model, data, &state, schedule)?;
            }
            log.records.push(EpochRecord {
                epoch,
                stage,
                log_density: acc.log_density,
                grad_norms: acc.norms(),
                sigma_z2: model.sigma_z2,
                pruned_frac: pruned_fraction(&model),
                seconds: clock(),
            });
            eps.advance();
            gamma.advance();
            epoch += 1;
        }
    }

    let ran_alternation = schedule.epochs.train + schedule.epochs.finetune > 0;
    if schedule.sigma_z_final && ran_alternation {
        refresh_sigma_z(&mut model, data, &state, schedule)?;
    }
    Ok(TrainOutput { model, log, state })
}

/// The cursor walks the decay with unit base so each module keeps its own
/// base rate; harmonic decay is linear in the base, and the empirical
/// recurrence is evaluated per module for exactness.
fn gamma_rates(base: &ModuleRates, cursor: &RateCursor, decay: Decay, scale: f64) -> ModuleRates {
    match decay {
        Decay::Harmonic { .. } => base.map(|b| b * cursor.rate() * scale),
        Decay::Empirical { .. } => base.map(|b| lr_at(cursor.k, b, &decay) * scale),
    }
}

#[allow(clippy::too_many_arguments)]
fn alternate<R: Rng + ?Sized>(
    model: &mut StoNetModel,
    batch: &Dataset,
    state: &mut LatentState,
    step: ImputeStep,
    rates: &ModuleRates,
    n_total: usize,
    prior: Option<&PriorHyper>,
    schedule: &TrainSchedule,
    rng: &mut R,
    acc: &mut EpochAcc,
) -> Result<()> {
    let input = model.latent_input(batch)?;
    let (mu1, trace) = mlp_forward(&model.latent.spec, &model.latent.params, input)?;
    for _ in 0..schedule.hmc_steps_per_iter {
        sghmc_move(state, model, batch, &mu1, step, rng)?;
    }
    let (grads, terms) = param_grads_with_trace(model, batch, &state.z, &mu1, &trace)?;
    let scale = n_total as f64 / batch.n() as f64;
    acc.add(&terms, grad_norms(&grads, scale));
    apply_param_grads(model, &grads, rates, scale, prior)
}

fn refresh_sigma_z(model: &mut StoNetModel, data: &Dataset, state: &LatentState, schedule: &TrainSchedule) -> Result<()> {
    let mu1 = latent_conditional_mean(model, data)?;
    let (a, b) = schedule.sigma_z_prior;
    model.sigma_z2 = update_sigma_z(&state.z, &mu1, a, b)?;
    Ok(())
}

/// Set pruning masks from the current weights and zero the pruned entries.
/// Without a prior nothing is pruned.
pub fn apply_pruning(model: &mut StoNetModel, prior: Option<&PriorHyper>) {
    let Some(h) = prior else { return };
    for id in MODULES {
        if let Some(m) = model.module_mut(id) {
            let flat = m.params.to_flat();
            let mut keep = prune_mask(&flat, h);
            if let Some(old) = &m.keep {
                for (k, o) in keep.iter_mut().zip(old) {
                    *k &= *o;
                }
            }
            m.params.apply_mask(&keep);
            m.keep = Some(keep);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, DagVariant, StoNetConfig, TreatmentKind};
    use crate::nn::Activation;
    use crate::rng::substream;
    use alloc::vec;

    #[test]
    fn lr_at_zero_is_base() {
        assert_eq!(lr_at(0, 0.3, &Decay::Empirical { alpha: 0.95 }), 0.3);
        assert_eq!(lr_at(0, 0.3, &Decay::Harmonic { alpha: 0.5, c_e: 1.0 }), 0.3);
    }

    #[test]
    fn harmonic_halves_at_one() {
        assert_eq!(lr_at(1, 0.8, &Decay::Harmonic { alpha: 0.5, c_e: 1.0 }), 0.4);
    }

    #[test]
    fn empirical_strictly_decreasing() {
        let d = Decay::Empirical { alpha: 0.95 };
        let mut prev = lr_at(0, 1e-3, &d);
        for k in 1..200 {
            let r = lr_at(k, 1e-3, &d);
            assert!(r < prev && r > 0.0);
            prev = r;
        }
    }

    #[test]
    fn cursor_matches_lr_at() {
        for d in [Decay::Empirical { alpha: 0.7 }, Decay::Harmonic { alpha: 0.6, c_e: 2.0 }] {
            let mut c = RateCursor::new(0.05, d);
            for k in 0..50 {
                assert_eq!(c.rate(), lr_at(k, 0.05, &d));
                c.advance();
            }
        }
    }

    #[test]
    fn harmonic_exponent_outside_unit_interval_rejected() {
        assert!(Decay::Harmonic { alpha: 1.0, c_e: 1.0 }.validate().is_err());
        assert!(Decay::Harmonic { alpha: 0.5, c_e: 0.0 }.validate().is_err());
    }

    #[test]
    fn sigma_z_hand_values() {
        let z = Matrix::column_vector(&[1.0, -1.0]);
        let zero = Matrix::zeros(2, 1);
        assert_eq!(update_sigma_z(&z, &zero, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(update_sigma_z(&zero, &zero, 1.0, 1.0).unwrap(), 1.0);
        assert!(matches!(update_sigma_z(&zero, &zero, 0.5, 1.0), Err(Error::Config(_))));
    }

    fn linear_model() -> (StoNetModel, Dataset) {
        let cfg = StoNetConfig {
            variant: DagVariant::SimpleConfounding,
            treatment: TreatmentKind::Continuous,
            d_a: 1,
            d_y: 1,
            d_x: 0,
            d_z: 1,
            latent_hidden: vec![],
            treatment_hidden: vec![],
            outcome_hidden: vec![],
            hidden_activation: Activation::Tanh,
            sigma_z2: 0.5,
            sigma_a2: 1.0,
            sigma_y2: 0.5,
            init_scale: 1.0,
            seed: 3,
        };
        let model = build_model(&cfg).unwrap();
        let a = Matrix::column_vector(&[0.5, -1.0, 2.0]);
        let y = Matrix::column_vector(&[1.0, 0.0, -0.5]);
        (model, Dataset::new(a, y, None).unwrap())
    }

    #[test]
    fn zero_eps_leaves_state() {
        let (model, data) = linear_model();
        let mut st = LatentState::at_mean(&model, &data).unwrap();
        st.v = Matrix::filled(3, 1, 0.7);
        let before = st.clone();
        let mut rng = substream(1, 0);
        let step = ImputeStep { eps: 0.0, eta: 1.0, leapfrog: false };
        impute_latent_step(&mut st, &model, &data, None, step, &mut rng).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn rows_outside_batch_untouched() {
        let (model, data) = linear_model();
        let mut st = LatentState::at_mean(&model, &data).unwrap();
        let before = st.clone();
        let mut rng = substream(1, 0);
        let step = ImputeStep { eps: 0.1, eta: 1.0, leapfrog: true };
        impute_latent_step(&mut st, &model, &data, Some(&[1]), step, &mut rng).unwrap();
        assert_eq!(st.z.row(0), before.z.row(0));
        assert_eq!(st.z.row(2), before.z.row(2));
        assert_ne!(st.z.row(1), before.z.row(1));
    }

    #[test]
    fn huge_rate_reports_numeric_error() {
        let (model, data) = linear_model();
        let mut st = LatentState::at_mean(&model, &data).unwrap();
        st.z = Matrix::filled(3, 1, 1e300);
        let mut rng = substream(1, 0);
        let step = ImputeStep { eps: 1e10, eta: 1.0, leapfrog: true };
        let r = impute_latent_step(&mut st, &model, &data, None, step, &mut rng);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_epochs_return_model_unchanged() {
        let (model, data) = linear_model();
        let schedule = TrainSchedule {
            epochs: StageEpochs::default(),
            ..TrainSchedule::default()
        };
        let mut rng = substream(0, 0);
        let out = train(model.clone(), &data, &schedule, None, &mut rng, &|| 0.0).unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.records.is_empty());
    }
}
