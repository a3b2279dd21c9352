//! Causal DAG variants built from MLP modules.
//!
//! | variant             | latent net input | treatment net input | outcome net input |
//! |---------------------|------------------|---------------------|-------------------|
//! | `SimpleConfounding` | `A`              | (none)              | `(Z, A)`          |
//! | `BasicProxy`        | `X`              | `Z`                 | `(Z, A)`          |
//! | `OutcomeProxy`      | `X`              | `Z`                 | `(Z, A, X)`       |
//! | `TreatmentProxy`    | `X`              | `(Z, X)`            | `(Z, A)`          |
//!
//! The latent layer is `Z = mu_1(input) + e_z` with `e_z ~ N(0, sigma_z^2 I)`.
//! Continuous treatments and outcomes are Gaussian around their network
//! means; a binary treatment uses a sigmoid head with a Bernoulli
//! likelihood.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::nn::{
    init_params, mlp_backward, mlp_backward_preactivation, mlp_eval, mlp_forward, Activation,
    ForwardTrace, MlpParams, MlpSpec, OutputActivation,
};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DagVariant {
    SimpleConfounding,
    BasicProxy,
    OutcomeProxy,
    TreatmentProxy,
}

impl DagVariant {
    pub fn uses_proxy(self) -> bool {
        !matches!(self, DagVariant::SimpleConfounding)
    }

    pub fn name(self) -> &'static str {
        match self {
            DagVariant::SimpleConfounding => "simple_confounding",
            DagVariant::BasicProxy => "basic_proxy",
            DagVariant::OutcomeProxy => "outcome_proxy",
            DagVariant::TreatmentProxy => "treatment_proxy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "simple_confounding" => DagVariant::SimpleConfounding,
            "basic_proxy" => DagVariant::BasicProxy,
            "outcome_proxy" => DagVariant::OutcomeProxy,
            "treatment_proxy" => DagVariant::TreatmentProxy,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreatmentKind {
    Binary,
    Continuous,
}

/// Ground truth attached to simulated data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub true_ate: Option<f64>,
    pub true_cate: Option<Vec<f64>>,
    pub true_z: Option<Matrix>,
    /// Per-unit marginal effect of each treatment component (`n x d_A`).
    pub marginal_effects: Option<Matrix>,
}

impl Truth {
    fn select_rows(&self, idx: &[usize]) -> Truth {
        Truth {
            true_ate: self.true_ate,
            true_cate: self
                .true_cate
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            true_z: self.true_z.as_ref().map(|z| z.select_rows(idx)),
            marginal_effects: self.marginal_effects.as_ref().map(|m| m.select_rows(idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub a: Matrix,
    pub y: Matrix,
    pub x: Option<Matrix>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(a: Matrix, y: Matrix, x: Option<Matrix>) -> Result<Self> {
        let n = a.rows();
        if y.rows() != n || x.as_ref().is_some_and(|x| x.rows() != n) {
            return Err(Error::Dimension(format!(
                "row counts differ: A has {n}, Y has {}, X has {:?}",
                y.rows(),
                x.as_ref().map(Matrix::rows)
            )));
        }
        Ok(Dataset { a, y, x, truth: None })
    }

    pub fn with_truth(mut self, truth: Truth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn d_a(&self) -> usize {
        self.a.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y.cols()
    }

    pub fn d_x(&self) -> usize {
        self.x.as_ref().map_or(0, Matrix::cols)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            a: self.a.select_rows(idx),
            y: self.y.select_rows(idx),
            x: self.x.as_ref().map(|x| x.select_rows(idx)),
            truth: self.truth.as_ref().map(|t| t.select_rows(idx)),
        }
    }

    /// Stack rows of several datasets (e.g. train + validation).
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("nothing to concatenate".into()))?;
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut rows = 0;
        let has_x = first.x.is_some();
        for p in parts {
            if p.d_a() != first.d_a() || p.d_y() != first.d_y() || p.x.is_some() != has_x || p.d_x() != first.d_x() {
                return Err(Error::Dimension("datasets have different column layouts".into()));
            }
            a.extend_from_slice(p.a.as_slice());
            y.extend_from_slice(p.y.as_slice());
            if let Some(px) = &p.x {
                x.extend_from_slice(px.as_slice());
            }
            rows += p.n();
        }
        let x = if has_x {
            Some(Matrix::from_vec(rows, first.d_x(), x)?)
        } else {
            None
        };
        let mut out = Dataset::new(
            Matrix::from_vec(rows, first.d_a(), a)?,
            Matrix::from_vec(rows, first.d_y(), y)?,
            x,
        )?;
        if parts.iter().all(|p| p.truth.is_some()) {
            let truths: Vec<&Truth> = parts.iter().map(|p| p.truth.as_ref().unwrap()).collect();
            out.truth = Some(concat_truth(&truths)?);
        }
        Ok(out)
    }
}

fn concat_truth(parts: &[&Truth]) -> Result<Truth> {
    let cate = if parts.iter().all(|t| t.true_cate.is_some()) {
        Some(parts.iter().flat_map(|t| t.true_cate.clone().unwrap()).collect())
    } else {
        None
    };
    let stack = |get: &dyn Fn(&Truth) -> Option<&Matrix>| -> Result<Option<Matrix>> {
        if !parts.iter().all(|t| get(t).is_some()) {
            return Ok(None);
        }
        let cols = get(parts[0]).unwrap().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            let m = get(t).unwrap();
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        Ok(Some(Matrix::from_vec(rows, cols, data)?))
    };
    Ok(Truth {
        true_ate: parts[0].true_ate,
        true_cate: cate,
        true_z: stack(&|t| t.true_z.as_ref())?,
        marginal_effects: stack(&|t| t.marginal_effects.as_ref())?,
    })
}

/// Everything needed to build a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoNetConfig {
    pub variant: DagVariant,
    pub treatment: TreatmentKind,
    pub d_a: usize,
    pub d_y: usize,
    /// Proxy width; must be 0 for `SimpleConfounding`.
    pub d_x: usize,
    pub d_z: usize,
    pub latent_hidden: Vec<usize>,
    pub treatment_hidden: Vec<usize>,
    pub outcome_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub sigma_z2: f64,
    pub sigma_a2: f64,
    pub sigma_y2: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl StoNetConfig {
    /// Missing-confounder simulation architecture: latent module
    /// `d_A -> 32 -> d_z`, outcome module `(d_z + d_A) -> 8 -> 4 -> 1`.
    pub fn simple_confounding(d_a: usize, d_z: usize) -> Self {
        StoNetConfig {
            variant: DagVariant::SimpleConfounding,
            treatment: TreatmentKind::Continuous,
            d_a,
            d_y: 1,
            d_x: 0,
            d_z,
            latent_hidden: vec![32],
            treatment_hidden: vec![],
            outcome_hidden: vec![8, 4],
            hidden_activation: Activation::Tanh,
            sigma_z2: 1e-5,
            sigma_a2: 1e-4,
            sigma_y2: 1e-3,
            init_scale: 1.0,
            seed: 0,
        }
    }

    /// Proxy architecture: latent `d_X -> 64 -> 32`, treatment
    /// `32 -> 16 -> d_A`, outcome `(32 + d_A) -> 8 -> 1`.
    pub fn proxy(variant: DagVariant, d_x: usize) -> Self {
        StoNetConfig {
            variant,
            treatment: TreatmentKind::Binary,
            d_a: 1,
            d_y: 1,
            d_x,
            d_z: 32,
            latent_hidden: vec![64],
            treatment_hidden: vec![16],
            outcome_hidden: vec![8],
            hidden_activation: Activation::Tanh,
            sigma_z2: 1e-5,
            sigma_a2: 1e-4,
            sigma_y2: 1e-3,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

/// One network module together with its pruning mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Module {
    pub spec: MlpSpec,
    pub params: MlpParams,
    /// `Some(mask)` once pruned; `false` entries stay exactly zero.
    pub keep: Option<Vec<bool>>,
}

impl Module {
    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        params.check(&spec)?;
        Ok(Module { spec, params, keep: None })
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.as_ref().map_or(0, |k| k.iter().filter(|&&b| !b).count())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleId {
    Latent,
    Treatment,
    Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoNetModel {
    pub variant: DagVariant,
    pub treatment: TreatmentKind,
    pub d_a: usize,
    pub d_y: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub latent: Module,
    pub treatment_net: Option<Module>,
    pub outcome: Module,
    pub sigma_z2: f64,
    pub sigma_a2: f64,
    pub sigma_y2: f64,
    pub seed: u64,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Build a model with freshly initialised parameters.
pub fn build_model(config: &StoNetConfig) -> Result<StoNetModel> {
    let c = config;
    if c.d_z == 0 || c.d_a == 0 || c.d_y == 0 {
        return Err(Error::Config(format!(
            "latent, treatment and outcome widths must be positive (d_z = {}, d_A = {}, d_Y = {})",
            c.d_z, c.d_a, c.d_y
        )));
    }
    let proxy = c.variant.uses_proxy();
    if proxy && c.d_x == 0 {
        return Err(Error::Config(format!(
            "variant {} needs proxy columns (d_X > 0)",
            c.variant.name()
        )));
    }
    if !proxy && c.d_x != 0 {
        return Err(Error::Config("simple confounding takes no proxy columns".into()));
    }
    let act = c.hidden_activation;
    let latent_in = if proxy { c.d_x } else { c.d_a };
    let latent_spec = MlpSpec::new(widths(latent_in, &c.latent_hidden, c.d_z), act, OutputActivation::Identity)?;
    let treatment_spec = if proxy {
        let input = match c.variant {
            DagVariant::TreatmentProxy => c.d_z + c.d_x,
            _ => c.d_z,
        };
        let out_act = match c.treatment {
            TreatmentKind::Binary => OutputActivation::Sigmoid,
            TreatmentKind::Continuous => OutputActivation::Identity,
        };
        Some(MlpSpec::new(widths(input, &c.treatment_hidden, c.d_a), act, out_act)?)
    } else {
        None
    };
    let outcome_in = match c.variant {
        DagVariant::OutcomeProxy => c.d_z + c.d_a + c.d_x,
        _ => c.d_z + c.d_a,
    };
    let outcome_spec = MlpSpec::new(widths(outcome_in, &c.outcome_hidden, c.d_y), act, OutputActivation::Identity)?;

    let latent = Module::new(
        latent_spec.clone(),
        init_params(&latent_spec, derive_seed(c.seed, 1), c.init_scale)?,
    )?;
    let treatment_net = match treatment_spec {
        Some(s) => Some(Module::new(s.clone(), init_params(&s, derive_seed(c.seed, 2), c.init_scale)?)?),
        None => None,
    };
    let outcome = Module::new(
        outcome_spec.clone(),
        init_params(&outcome_spec, derive_seed(c.seed, 3), c.init_scale)?,
    )?;
    let model = StoNetModel {
        variant: c.variant,
        treatment: c.treatment,
        d_a: c.d_a,
        d_y: c.d_y,
        d_x: c.d_x,
        d_z: c.d_z,
        latent,
        treatment_net,
        outcome,
        sigma_z2: c.sigma_z2,
        sigma_a2: c.sigma_a2,
        sigma_y2: c.sigma_y2,
        seed: c.seed,
    };
    model.validate()?;
    Ok(model)
}

impl StoNetModel {
    /// Check variances and module wiring.
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.sigma_z2) || !pos(self.sigma_y2) {
            return Err(Error::Config(format!(
                "noise variances must be positive (sigma_z2 = {}, sigma_y2 = {})",
                self.sigma_z2, self.sigma_y2
            )));
        }
        if self.d_z == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let proxy = self.variant.uses_proxy();
        let expect_latent_in = if proxy { self.d_x } else { self.d_a };
        let wiring = |m: &Module, input: usize, output: usize, name: &str| -> Result<()> {
            m.spec.validate()?;
            m.params.check(&m.spec)?;
            if m.spec.input_dim() != input || m.spec.output_dim() != output {
                return Err(Error::Config(format!(
                    "{name} net maps {} -> {}, expected {input} -> {output}",
                    m.spec.input_dim(),
                    m.spec.output_dim()
                )));
            }
            if let Some(k) = &m.keep {
                if k.len() != m.spec.param_count() {
                    return Err(Error::Config(format!("{name} mask has the wrong length")));
                }
            }
            Ok(())
        };
        wiring(&self.latent, expect_latent_in, self.d_z, "latent")?;
        let outcome_in = match self.variant {
            DagVariant::OutcomeProxy => self.d_z + self.d_a + self.d_x,
            _ => self.d_z + self.d_a,
        };
        wiring(&self.outcome, outcome_in, self.d_y, "outcome")?;
        match (&self.treatment_net, proxy) {
            (Some(t), true) => {
                if !pos(self.sigma_a2) {
                    return Err(Error::Config(format!(
                        "treatment noise variance must be positive, got {}",
                        self.sigma_a2
                    )));
                }
                let input = match self.variant {
                    DagVariant::TreatmentProxy => self.d_z + self.d_x,
                    _ => self.d_z,
                };
                wiring(t, input, self.d_a, "treatment")?;
                let sigmoid = t.spec.output_activation == OutputActivation::Sigmoid;
                if sigmoid != (self.treatment == TreatmentKind::Binary) {
                    return Err(Error::Config(
                        "sigmoid treatment head must be used exactly for binary treatments".into(),
                    ));
                }
            }
            (None, true) => {
                return Err(Error::Config(format!(
                    "variant {} requires a treatment network",
                    self.variant.name()
                )))
            }
            (Some(_), false) => {
                return Err(Error::Config("simple confounding has no treatment network".into()))
            }
            (None, false) => {}
        }
        if self.outcome.spec.output_activation != OutputActivation::Identity
            || self.latent.spec.output_activation != OutputActivation::Identity
        {
            return Err(Error::Config("latent and outcome heads must be linear".into()));
        }
        Ok(())
    }

    pub fn module(&self, id: ModuleId) -> Option<&Module> {
        match id {
            ModuleId::Latent => Some(&self.latent),
            ModuleId::Treatment => self.treatment_net.as_ref(),
            ModuleId::Outcome => Some(&self.outcome),
        }
    }

    pub fn module_mut(&mut self, id: ModuleId) -> Option<&mut Module> {
        match id {
            ModuleId::Latent => Some(&mut self.latent),
            ModuleId::Treatment => self.treatment_net.as_mut(),
            ModuleId::Outcome => Some(&mut self.outcome),
        }
    }

    /// Total number of connections over all modules.
    pub fn param_count(&self) -> usize {
        self.latent.spec.param_count()
            + self.treatment_net.as_ref().map_or(0, |t| t.spec.param_count())
            + self.outcome.spec.param_count()
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.d_a() != self.d_a || data.d_y() != self.d_y {
            return Err(Error::Dimension(format!(
                "dataset has d_A = {}, d_Y = {}; model expects {}, {}",
                data.d_a(),
                data.d_y(),
                self.d_a,
                self.d_y
            )));
        }
        match (&data.x, self.variant.uses_proxy()) {
            (Some(x), true) if x.cols() == self.d_x => Ok(()),
            (Some(x), true) => Err(Error::Dimension(format!(
                "dataset has {} proxy columns, model expects {}",
                x.cols(),
                self.d_x
            ))),
            (None, true) => Err(Error::Dimension(format!(
                "variant {} needs proxy columns",
                self.variant.name()
            ))),
            _ => Ok(()),
        }
    }

    /// Input of the latent module: `A` for simple confounding, `X` otherwise.
    pub fn latent_input<'a>(&self, data: &'a Dataset) -> Result<&'a Matrix> {
        self.check_data(data)?;
        if self.variant.uses_proxy() {
            Ok(data.x.as_ref().unwrap())
        } else {
            Ok(&data.a)
        }
    }

    fn treatment_input(&self, z: &Matrix, data: &Dataset) -> Result<Matrix> {
        match self.variant {
            DagVariant::TreatmentProxy => Matrix::hcat(&[z, data.x.as_ref().unwrap()]),
            _ => Ok(z.clone()),
        }
    }

    fn outcome_input(&self, z: &Matrix, a: &Matrix, x: Option<&Matrix>) -> Result<Matrix> {
        match self.variant {
            DagVariant::OutcomeProxy => {
                let x = x.ok_or_else(|| Error::Dimension("outcome-proxy model needs X".into()))?;
                Matrix::hcat(&[z, a, x])
            }
            _ => Matrix::hcat(&[z, a]),
        }
    }
}

/// `mu_1` applied row-wise to `A` (simple) or `X` (proxy variants).
pub fn latent_conditional_mean(model: &StoNetModel, data: &Dataset) -> Result<Matrix> {
    let input = model.latent_input(data)?;
    mlp_eval(&model.latent.spec, &model.latent.params, input)
}

/// Outcome-net mean at the concatenated input `(Z, A[, X])`.
pub fn predict_outcome(model: &StoNetModel, z: &Matrix, a: &Matrix, x: Option<&Matrix>) -> Result<Matrix> {
    if z.cols() != model.d_z || a.cols() != model.d_a || z.rows() != a.rows() {
        return Err(Error::Dimension(format!(
            "Z is {:?} and A is {:?}; model expects d_z = {}, d_A = {}",
            z.shape(),
            a.shape(),
            model.d_z,
            model.d_a
        )));
    }
    let input = model.outcome_input(z, a, x)?;
    mlp_eval(&model.outcome.spec, &model.outcome.params, &input)
}

/// Per-module conditional log densities (with normalising constants).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogDensityTerms {
    /// `log pi(Z | input, theta_1)`
    pub latent: f64,
    /// `log pi(A | Z[, X], theta_2)`; zero for simple confounding.
    pub treatment: f64,
    /// `log pi(Y | Z, A[, X], theta_out)`
    pub outcome: f64,
}

impl LogDensityTerms {
    pub fn total(&self) -> f64 {
        self.latent + self.treatment + self.outcome
    }
}

/// Gradients for each module, shaped like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleGrads {
    pub latent: MlpParams,
    pub treatment: Option<MlpParams>,
    pub outcome: MlpParams,
}

impl ModuleGrads {
    pub fn get(&self, id: ModuleId) -> Option<&MlpParams> {
        match id {
            ModuleId::Latent => Some(&self.latent),
            ModuleId::Treatment => self.treatment.as_ref(),
            ModuleId::Outcome => Some(&self.outcome),
        }
    }

    pub fn get_mut(&mut self, id: ModuleId) -> Option<&mut MlpParams> {
        match id {
            ModuleId::Latent => Some(&mut self.latent),
            ModuleId::Treatment => self.treatment.as_mut(),
            ModuleId::Outcome => Some(&mut self.outcome),
        }
    }
}

/// Likelihood side of the network given `Z`: the treatment and outcome heads.
pub(crate) struct HeadEval {
    /// Gradient of the head log-likelihoods with respect to `Z` (per row).
    pub z_grad: Matrix,
    pub treatment_grads: Option<MlpParams>,
    pub outcome_grads: MlpParams,
    pub ll_treatment: f64,
    pub ll_outcome: f64,
}

fn gaussian_head(out: &Matrix, target: &Matrix, var: f64) -> (Matrix, f64) {
    let mut g = Matrix::zeros(out.rows(), out.cols());
    let mut ll = 0.0;
    let c = -0.5 * (math::LN_2PI + math::ln(var));
    for ((gv, &o), &t) in g.as_mut_slice().iter_mut().zip(out.as_slice()).zip(target.as_slice()) {
        let r = t - o;
        *gv = r / var;
        ll += c - 0.5 * r * r / var;
    }
    (g, ll)
}

/// Gradient with respect to the logits and Bernoulli log-likelihood.
fn bernoulli_head(trace: &ForwardTrace, target: &Matrix) -> (Matrix, f64) {
    let logits = trace.pre.last().unwrap();
    let probs = trace.output();
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    let mut ll = 0.0;
    for (((gv, &l), &p), &t) in g
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(probs.as_slice())
        .zip(target.as_slice())
    {
        *gv = t - p;
        ll += t * l - math::softplus(l);
    }
    (g, ll)
}

pub(crate) fn eval_heads(model: &StoNetModel, data: &Dataset, z: &Matrix) -> Result<HeadEval> {
    let n = data.n();
    let mut z_grad = Matrix::zeros(n, model.d_z);
    let add_z = |z_grad: &mut Matrix, input_grad: &Matrix| {
        for i in 0..n {
            let src = &input_grad.row(i)[..model.d_z];
            for (d, s) in z_grad.row_mut(i).iter_mut().zip(src) {
                *d += s;
            }
        }
    };

    let (treatment_grads, ll_treatment) = match &model.treatment_net {
        Some(t) => {
            let input = model.treatment_input(z, data)?;
            let (out, trace) = mlp_forward(&t.spec, &t.params, &input)?;
            let (pg, ig, ll) = match model.treatment {
                TreatmentKind::Binary => {
                    let (g, ll) = bernoulli_head(&trace, &data.a);
                    let (pg, ig) = mlp_backward_preactivation(&t.spec, &t.params, &trace, &g)?;
                    (pg, ig, ll)
                }
                TreatmentKind::Continuous => {
                    let (g, ll) = gaussian_head(&out, &data.a, model.sigma_a2);
                    let (pg, ig) = mlp_backward(&t.spec, &t.params, &trace, &g)?;
                    (pg, ig, ll)
                }
            };
            add_z(&mut z_grad, &ig);
            (Some(pg), ll)
        }
        None => (None, 0.0),
    };

    let input = model.outcome_input(z, &data.a, data.x.as_ref())?;
    let (out, trace) = mlp_forward(&model.outcome.spec, &model.outcome.params, &input)?;
    let (g, ll_outcome) = gaussian_head(&out, &data.y, model.sigma_y2);
    let (outcome_grads, ig) = mlp_backward(&model.outcome.spec, &model.outcome.params, &trace, &g)?;
    add_z(&mut z_grad, &ig);

    Ok(HeadEval {
        z_grad,
        treatment_grads,
        outcome_grads,
        ll_treatment,
        ll_outcome,
    })
}

/// `log N(Z; mu_1, sigma_z^2 I)` summed over rows and the residual scaled by
/// the precision, `(Z - mu_1) / sigma_z^2`.
pub(crate) fn latent_term(model: &StoNetModel, z: &Matrix, mu1: &Matrix) -> (Matrix, f64) {
    let var = model.sigma_z2;
    let c = -0.5 * (math::LN_2PI + math::ln(var));
    let mut scaled = Matrix::zeros(z.rows(), z.cols());
    let mut ll = 0.0;
    for ((s, &zv), &m) in scaled.as_mut_slice().iter_mut().zip(z.as_slice()).zip(mu1.as_slice()) {
        let r = zv - m;
        *s = r / var;
        ll += c - 0.5 * r * r / var;
    }
    (scaled, ll)
}

fn check_latent(model: &StoNetModel, data: &Dataset, z: &Matrix) -> Result<()> {
    model.check_data(data)?;
    z.check_shape(data.n(), model.d_z, "latent matrix Z")?;
    if !z.is_finite() {
        return Err(Error::Numeric("non-finite latent values".into()));
    }
    Ok(())
}

/// Conditional log densities of each module at the given imputation.
pub fn log_density_terms(model: &StoNetModel, data: &Dataset, z: &Matrix) -> Result<LogDensityTerms> {
    check_latent(model, data, z)?;
    let mu1 = latent_conditional_mean(model, data)?;
    let (_, latent) = latent_term(model, z, &mu1);
    let heads = eval_heads(model, data, z)?;
    Ok(LogDensityTerms {
        latent,
        treatment: heads.ll_treatment,
        outcome: heads.ll_outcome,
    })
}

/// Joint log density accumulated row by row, independently of the
/// per-module sums.
pub fn joint_log_density(model: &StoNetModel, data: &Dataset, z: &Matrix) -> Result<f64> {
    check_latent(model, data, z)?;
    let mut total = 0.0;
    for i in 0..data.n() {
        let row = data.select_rows(&[i]);
        let zi = z.select_rows(&[i]);
        total += log_density_terms(model, &row, &zi)?.total();
    }
    Ok(total)
}

/// Per-row gradient of the joint log density with respect to `Z`.
pub fn latent_log_density_grad(model: &StoNetModel, data: &Dataset, z: &Matrix) -> Result<Matrix> {
    check_latent(model, data, z)?;
    let mu1 = latent_conditional_mean(model, data)?;
    latent_grad_with_mean(model, data, z, &mu1)
}

pub(crate) fn latent_grad_with_mean(
    model: &StoNetModel,
    data: &Dataset,
    z: &Matrix,
    mu1: &Matrix,
) -> Result<Matrix> {
    let (scaled, _) = latent_term(model, z, mu1);
    let mut g = eval_heads(model, data, z)?.z_grad;
    g.axpy(-1.0, &scaled);
    Ok(g)
}

/// Gradient of each module's own conditional log-likelihood with respect to
/// its parameters. Pruned entries are zero.
pub fn param_log_density_grads(model: &StoNetModel, data: &Dataset, z: &Matrix) -> Result<ModuleGrads> {
    check_latent(model, data, z)?;
    let input = model.latent_input(data)?;
    let (mu1, trace) = mlp_forward(&model.latent.spec, &model.latent.params, input)?;
    let (grads, _) = param_grads_with_trace(model, data, z, &mu1, &trace)?;
    Ok(grads)
}

pub(crate) fn param_grads_with_trace(
    model: &StoNetModel,
    data: &Dataset,
    z: &Matrix,
    mu1: &Matrix,
    trace: &ForwardTrace,
) -> Result<(ModuleGrads, LogDensityTerms)> {
    let (scaled, ll_latent) = latent_term(model, z, mu1);
    let (latent, _) = mlp_backward(&model.latent.spec, &model.latent.params, trace, &scaled)?;
    let heads = eval_heads(model, data, z)?;
    let mut grads = ModuleGrads {
        latent,
        treatment: heads.treatment_grads,
        outcome: heads.outcome_grads,
    };
    mask_grads(model, &mut grads);
    Ok((
        grads,
        LogDensityTerms {
            latent: ll_latent,
            treatment: heads.ll_treatment,
            outcome: heads.ll_outcome,
        },
    ))
}

/// Gradients of the deterministic network obtained by fixing `Z = mu_1`
/// and back-propagating the head likelihoods through the latent module.
pub fn vanilla_grads(model: &StoNetModel, data: &Dataset) -> Result<(ModuleGrads, LogDensityTerms)> {
    let input = model.latent_input(data)?;
    let (mu1, trace) = mlp_forward(&model.latent.spec, &model.latent.params, input)?;
    let heads = eval_heads(model, data, &mu1)?;
    let (latent, _) = mlp_backward(&model.latent.spec, &model.latent.params, &trace, &heads.z_grad)?;
    let (_, ll_latent) = latent_term(model, &mu1, &mu1);
    let mut grads = ModuleGrads {
        latent,
        treatment: heads.treatment_grads,
        outcome: heads.outcome_grads,
    };
    mask_grads(model, &mut grads);
    Ok((
        grads,
        LogDensityTerms {
            latent: ll_latent,
            treatment: heads.ll_treatment,
            outcome: heads.ll_outcome,
        },
    ))
}

fn mask_grads(model: &StoNetModel, grads: &mut ModuleGrads) {
    for id in [ModuleId::Latent, ModuleId::Treatment, ModuleId::Outcome] {
        if let (Some(m), Some(g)) = (model.module(id), grads.get_mut(id)) {
            if let Some(k) = &m.keep {
                g.apply_mask(k);
            }
        }
    }
}
