//! Experiment configuration, read from TOML.
//!
//! Every section except `[data]` is optional. Model and schedule fields left
//! out fall back to presets chosen from the data: the simple-confounding
//! architecture when the data has no proxy columns, the proxy architecture
//! otherwise, and [`TrainSchedule::tuned`] for the sampler.

use std::path::{Path, PathBuf};

use ci_stonet_core::datagen::{DgpKind, DgpSpec};
use ci_stonet_core::diagnostics::{BootstrapConfig, OverlapProtocol};
use ci_stonet_core::model::{DagVariant, Dataset, StoNetConfig, StoNetModel, TreatmentKind};
use ci_stonet_core::nn::Activation;
use ci_stonet_core::prior::PriorHyper;
use ci_stonet_core::sghmc::{Decay, ModuleRates, StageEpochs, TrainSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; replication `r` derives its own streams from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Checkpoint read by `estimate`, `diagnose` and `bootstrap`; defaults to
    /// `checkpoint.json` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
}

fn one() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Either a simulator (`kind`) or CSV files (`train_csv`, ...).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: Option<String>,
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub xi_beta: Option<f64>,
    pub outcome_proxy_weight: Option<f64>,
    pub noise_scale: Option<f64>,
    pub theta0: Option<f64>,
    pub train_csv: Option<PathBuf>,
    pub val_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    /// Explicit column roles for external tables. When all three are absent
    /// columns are assigned by their `a_`, `y_` and `x_` prefixes.
    pub treatment_columns: Option<Vec<String>>,
    pub outcome_columns: Option<Vec<String>>,
    pub proxy_columns: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Simulated(DgpSpec),
    Csv { train: PathBuf, val: Option<PathBuf>, test: Option<PathBuf> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Tanh,
    Relu,
    Sigmoid,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::Relu => Activation::Relu,
            ActivationName::Sigmoid => Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `simple_confounding`, `basic_proxy`, `outcome_proxy` or `treatment_proxy`.
    pub variant: Option<String>,
    /// `binary` or `continuous`.
    pub treatment: Option<String>,
    pub d_z: Option<usize>,
    pub latent_hidden: Option<Vec<usize>>,
    pub treatment_hidden: Option<Vec<usize>>,
    pub outcome_hidden: Option<Vec<usize>>,
    pub activation: Option<ActivationName>,
    pub sigma_z2: Option<f64>,
    pub sigma_a2: Option<f64>,
    pub sigma_y2: Option<f64>,
    pub init_scale: Option<f64>,
}

/// Latent width of the simple-confounding preset.
pub const SIMPLE_LATENT_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateSpec {
    /// See [`ModuleRates::effective`].
    Effective { lr: f64 },
    Absolute { latent: f64, treatment: f64, outcome: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    #[default]
    Tuned,
    Published,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub preset: SchedulePreset,
    pub pretrain: Option<usize>,
    pub train: Option<usize>,
    pub finetune: Option<usize>,
    pub eps0: Option<f64>,
    pub eta: Option<f64>,
    pub leapfrog: Option<bool>,
    /// 0 means full batch.
    pub minibatch: Option<usize>,
    pub hmc_steps: Option<usize>,
    pub rates: Option<RateSpec>,
    pub eps_decay: Option<Decay>,
    pub gamma_decay: Option<Decay>,
    pub finetune_scale: Option<f64>,
    pub sigma_z_each_epoch: Option<bool>,
    pub sigma_z_final: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub enabled: bool,
    pub lambda_n: f64,
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { enabled: true, lambda_n: 1e-6, sigma0_sq: 1e-4, sigma1_sq: 1e-1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    /// Monte Carlo draws of `Z` per unit.
    pub draws: usize,
    /// Finite-difference half-width for marginal effects.
    pub delta: f64,
    /// Treatment vectors at which to report potential outcomes. Binary
    /// treatments default to `[[0], [1]]`.
    pub grid: Option<Vec<Vec<f64>>>,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection { draws: 50, delta: 0.1, grid: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub alpha: f64,
    pub draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub eps: f64,
    pub eta: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        let p = OverlapProtocol::default();
        DiagnosticsSection { alpha: 0.1, draws: 20, burn_in: p.burn_in, thin: p.thin, eps: p.eps, eta: p.eta }
    }
}

impl DiagnosticsSection {
    pub fn protocol(&self) -> OverlapProtocol {
        OverlapProtocol { burn_in: self.burn_in, thin: self.thin, eps: self.eps, eta: self.eta, leapfrog: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub level: f64,
    pub short_epochs: usize,
    pub draws: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection { replicates: 100, level: 0.95, short_epochs: 20, draws: 50 }
    }
}

impl ExperimentConfig {
    /// Parse a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Simulator config with every other section at its default.
    pub fn simulated(kind: DgpKind) -> Self {
        ExperimentConfig {
            seed: 0,
            replications: 1,
            output_dir: default_output_dir(),
            checkpoint: None,
            data: DataSection { kind: Some(kind.name().to_string()), ..DataSection::default() },
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            prior: PriorSection::default(),
            estimate: EstimateSection::default(),
            diagnostics: DiagnosticsSection::default(),
            bootstrap: BootstrapSection::default(),
        }
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.checkpoint, &mut self.data.train_csv, &mut self.data.val_csv, &mut self.data.test_csv]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.replications == 0 {
            return Err(CliError::Config("replications must be at least 1".into()));
        }
        self.data_source()?;
        if let Some(v) = &self.model.variant {
            DagVariant::from_name(v).ok_or_else(|| CliError::Config(format!("unknown model variant `{v}`")))?;
        }
        if let Some(t) = &self.model.treatment {
            parse_treatment(t)?;
        }
        if self.estimate.draws == 0 {
            return Err(CliError::Config("estimate.draws must be at least 1".into()));
        }
        if !(self.estimate.delta > 0.0 && self.estimate.delta.is_finite()) {
            return Err(CliError::Config("estimate.delta must be positive".into()));
        }
        let d = &self.diagnostics;
        if !(d.alpha > 0.0 && d.alpha < 0.5) {
            return Err(CliError::Config(format!("diagnostics.alpha must lie in (0, 0.5), got {}", d.alpha)));
        }
        if d.draws == 0 || d.thin == 0 {
            return Err(CliError::Config("diagnostics.draws and diagnostics.thin must be at least 1".into()));
        }
        let b = &self.bootstrap;
        if b.replicates < 2 {
            return Err(CliError::Config(format!("bootstrap.replicates must be at least 2, got {}", b.replicates)));
        }
        if !(b.level > 0.0 && b.level < 1.0) {
            return Err(CliError::Config(format!("bootstrap.level must lie in (0, 1), got {}", b.level)));
        }
        if b.draws == 0 {
            return Err(CliError::Config("bootstrap.draws must be at least 1".into()));
        }
        self.prior_hyper()?;
        Ok(())
    }

    pub fn data_source(&self) -> CliResult<DataSource> {
        let d = &self.data;
        match (&d.kind, &d.train_csv) {
            (Some(kind), None) => {
                let kind = DgpKind::from_name(kind)
                    .ok_or_else(|| CliError::Config(format!("unknown simulator `{kind}`")))?;
                let base = DgpSpec::default_sizes(kind, 0);
                let mut spec = DgpSpec::new(
                    kind,
                    d.n_train.unwrap_or(base.n_train),
                    d.n_val.unwrap_or(base.n_val),
                    d.n_test.unwrap_or(base.n_test),
                    0,
                );
                if let Some(v) = d.xi_beta {
                    spec.xi_beta = v;
                }
                if let Some(v) = d.outcome_proxy_weight {
                    spec.outcome_proxy_weight = v;
                }
                if let Some(v) = d.noise_scale {
                    spec.noise_scale = v;
                }
                spec.theta0 = d.theta0;
                spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
                Ok(DataSource::Simulated(spec))
            }
            (None, Some(train)) => Ok(DataSource::Csv {
                train: train.clone(),
                val: d.val_csv.clone(),
                test: d.test_csv.clone(),
            }),
            (Some(_), Some(_)) => Err(CliError::Config("set either data.kind or data.train_csv, not both".into())),
            (None, None) => Err(CliError::Config("data needs a simulator `kind` or a `train_csv` path".into())),
        }
    }

    /// Model configuration for data shaped like `data`.
    pub fn model_config(&self, data: &Dataset, seed: u64) -> CliResult<StoNetConfig> {
        let m = &self.model;
        let variant = match &m.variant {
            Some(v) => DagVariant::from_name(v).ok_or_else(|| CliError::Config(format!("unknown model variant `{v}`")))?,
            None if data.d_x() == 0 => DagVariant::SimpleConfounding,
            None => DagVariant::BasicProxy,
        };
        let treatment = match &m.treatment {
            Some(t) => parse_treatment(t)?,
            None if data.d_a() == 1 && data.a.as_slice().iter().all(|&v| v == 0.0 || v == 1.0) => TreatmentKind::Binary,
            None => TreatmentKind::Continuous,
        };
        let mut c = if variant.uses_proxy() {
            StoNetConfig { variant, ..StoNetConfig::proxy(variant, data.d_x()) }
        } else {
            StoNetConfig::simple_confounding(data.d_a(), SIMPLE_LATENT_DIM)
        };
        c.treatment = treatment;
        c.d_a = data.d_a();
        c.d_y = data.d_y();
        c.d_x = if variant.uses_proxy() { data.d_x() } else { 0 };
        c.seed = seed;
        if let Some(v) = m.d_z {
            c.d_z = v;
        }
        if let Some(v) = &m.latent_hidden {
            c.latent_hidden = v.clone();
        }
        if let Some(v) = &m.treatment_hidden {
            c.treatment_hidden = v.clone();
        }
        if let Some(v) = &m.outcome_hidden {
            c.outcome_hidden = v.clone();
        }
        if let Some(v) = m.activation {
            c.hidden_activation = v.into();
        }
        if let Some(v) = m.sigma_z2 {
            c.sigma_z2 = v;
        }
        if let Some(v) = m.sigma_a2 {
            c.sigma_a2 = v;
        }
        if let Some(v) = m.sigma_y2 {
            c.sigma_y2 = v;
        }
        if let Some(v) = m.init_scale {
            c.init_scale = v;
        }
        Ok(c)
    }

    /// Sampler schedule for `model` trained on `n` rows.
    pub fn train_schedule(&self, model: &StoNetModel, n: usize) -> CliResult<TrainSchedule> {
        let s = &self.schedule;
        let mut t = match s.preset {
            SchedulePreset::Tuned => TrainSchedule::tuned(model, n),
            SchedulePreset::Published => TrainSchedule::default(),
        };
        let e = t.epochs;
        t.epochs = StageEpochs {
            pretrain: s.pretrain.unwrap_or(e.pretrain),
            train: s.train.unwrap_or(e.train),
            finetune: s.finetune.unwrap_or(e.finetune),
        };
        if let Some(v) = s.eps0 {
            t.eps0 = v;
        }
        if let Some(v) = s.eta {
            t.eta = v;
        }
        if let Some(v) = s.leapfrog {
            t.leapfrog = v;
        }
        if let Some(v) = s.minibatch {
            t.minibatch = (v > 0).then_some(v);
        }
        if let Some(v) = s.hmc_steps {
            t.hmc_steps_per_iter = v;
        }
        match s.rates {
            Some(RateSpec::Effective { lr }) => t.gamma0 = ModuleRates::effective(lr, model, n),
            Some(RateSpec::Absolute { latent, treatment, outcome }) => {
                t.gamma0 = ModuleRates { latent, treatment, outcome }
            }
            None => {}
        }
        if let Some(v) = s.eps_decay {
            t.eps_decay = v;
        }
        if let Some(v) = s.gamma_decay {
            t.gamma_decay = v;
        }
        if let Some(v) = s.finetune_scale {
            t.finetune_scale = v;
        }
        if let Some(v) = s.sigma_z_each_epoch {
            t.sigma_z_each_epoch = v;
        }
        if let Some(v) = s.sigma_z_final {
            t.sigma_z_final = v;
        }
        t.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(t)
    }

    pub fn prior_hyper(&self) -> CliResult<Option<PriorHyper>> {
        let p = &self.prior;
        if !p.enabled {
            return Ok(None);
        }
        PriorHyper::from_variances(p.lambda_n, p.sigma0_sq, p.sigma1_sq)
            .map(Some)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn bootstrap_config(&self, schedule: TrainSchedule) -> CliResult<BootstrapConfig> {
        let b = &self.bootstrap;
        Ok(BootstrapConfig {
            replicates: b.replicates,
            level: b.level,
            short_epochs: b.short_epochs,
            draws: b.draws,
            schedule,
            prior: self.prior_hyper()?,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("checkpoint.json"))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_treatment(s: &str) -> CliResult<TreatmentKind> {
    match s {
        "binary" => Ok(TreatmentKind::Binary),
        "continuous" => Ok(TreatmentKind::Continuous),
        _ => Err(CliError::Config(format!("treatment must be `binary` or `continuous`, got `{s}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml("[data]\nkind = \"proxy_sim\"\n").unwrap();
        assert_eq!(cfg.replications, 1);
        assert_eq!(cfg.prior, PriorSection::default());
        match cfg.data_source().unwrap() {
            DataSource::Simulated(spec) => assert_eq!((spec.n_train, spec.n_val, spec.n_test), (2000, 500, 500)),
            other => panic!("unexpected source {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "replications = 0\n[data]\nkind = \"proxy_sim\"\n",
            "[data]\nkind = \"nope\"\n",
            "[data]\n",
            "[data]\nkind = \"proxy_sim\"\ntrain_csv = \"x.csv\"\n",
            "[data]\nkind = \"proxy_sim\"\n[bootstrap]\nreplicates = 1\n",
            "[data]\nkind = \"proxy_sim\"\n[prior]\nsigma0_sq = 1.0\nsigma1_sq = 0.1\n",
            "[data]\nkind = \"proxy_sim\"\nunknown_key = 3\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn schedule_overrides_apply() {
        let text = "[data]\nkind = \"misspec_basic_proxy\"\n[schedule]\ntrain = 7\nminibatch = 0\nrates = { kind = \"absolute\", latent = 1e-9, treatment = 2e-6, outcome = 3e-6 }\neps_decay = { kind = \"harmonic\", alpha = 0.5, c_e = 10.0 }\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let spec = match cfg.data_source().unwrap() {
            DataSource::Simulated(s) => s,
            _ => unreachable!(),
        };
        let data = ci_stonet_core::datagen::generate(&DgpSpec { n_train: 20, n_val: 5, n_test: 5, ..spec }).unwrap();
        let mc = cfg.model_config(&data.train, 1).unwrap();
        assert_eq!(mc.variant, DagVariant::BasicProxy);
        assert_eq!(mc.treatment, TreatmentKind::Binary);
        let model = ci_stonet_core::model::build_model(&mc).unwrap();
        let t = cfg.train_schedule(&model, 20).unwrap();
        assert_eq!(t.epochs.train, 7);
        assert_eq!(t.minibatch, None);
        assert_eq!(t.gamma0.treatment, 2e-6);
        assert_eq!(t.eps_decay, Decay::Harmonic { alpha: 0.5, c_e: 10.0 });
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::simulated(DgpKind::ProxySim);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
