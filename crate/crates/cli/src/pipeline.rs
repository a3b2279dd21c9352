//! Data loading, training, estimation and the benchmark loop.
//!
//! Seeds: replication `r` under master seed `s` owns
//! `derive_seed(s, r)`, and each stage derives its own child seed from that
//! (data 0, model init 1, training 2, estimation 3, overlap 4, bootstrap 5).
//! Adding replications or stages never shifts an existing stream.
//! Single-run subcommands use replication 0.

use std::path::{Path, PathBuf};

use ci_stonet_core::datagen::{generate, DgpSpec};
use ci_stonet_core::diagnostics::{
    bootstrap_point_estimate, bootstrap_replicate, overlap_stress_test, summarize_bootstrap, BootstrapResult,
    OverlapReport,
};
use ci_stonet_core::estimate::{binary_effects, marginal_effects, pehe, potential_outcomes, MarginalEffects, PsiEstimate};
use ci_stonet_core::model::{build_model, Dataset, StoNetModel, TreatmentKind};
use ci_stonet_core::rng::{derive_seed, substream};
use ci_stonet_core::sghmc::{train, TrainLog, TrainSchedule};
use ci_stonet_core::Matrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::csvio::{self, fmt, Manifest, Schema};
use crate::error::{CliError, CliResult};

/// Environment variable capping parallel replications.
pub const THREADS_ENV: &str = "CI_STONET_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub replication: u64,
    pub data: u64,
    pub model: u64,
    pub train: u64,
    pub estimate: u64,
    pub overlap: u64,
    pub bootstrap: u64,
}

impl Seeds {
    pub fn for_replication(master: u64, replication: usize) -> Self {
        let r = derive_seed(master, replication as u64);
        Seeds {
            replication: r,
            data: derive_seed(r, 0),
            model: derive_seed(r, 1),
            train: derive_seed(r, 2),
            estimate: derive_seed(r, 3),
            overlap: derive_seed(r, 4),
            bootstrap: derive_seed(r, 5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
    pub constants: Vec<(String, f64)>,
}

impl Splits {
    /// Training plus validation rows.
    pub fn in_sample(&self) -> CliResult<Dataset> {
        match &self.val {
            Some(v) => Dataset::concat(&[&self.train, v]).map_err(CliError::core("combine train and validation")),
            None => Ok(self.train.clone()),
        }
    }
}

/// `train.csv` -> `train_truth.csv`.
pub fn truth_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}_truth.csv"))
}

fn load_csv_split(cfg: &ExperimentConfig, path: &Path) -> CliResult<Dataset> {
    let d = &cfg.data;
    let mut data = if d.treatment_columns.is_none() && d.outcome_columns.is_none() && d.proxy_columns.is_none() {
        csvio::load_prefixed_dataset(path)?
    } else {
        let schema = Schema {
            treatment: d.treatment_columns.clone().unwrap_or_default(),
            outcome: d.outcome_columns.clone().unwrap_or_default(),
            proxy: d.proxy_columns.clone().unwrap_or_default(),
        };
        csvio::load_dataset_csv(path, &schema)?
    };
    let tp = truth_path(path);
    if tp.exists() {
        let truth = csvio::load_truth_csv(&tp)?;
        if truth.true_cate.as_ref().is_some_and(|c| c.len() != data.n()) {
            return Err(CliError::schema(&tp, "truth table length differs from the dataset"));
        }
        data = data.with_truth(truth);
    }
    Ok(data)
}

pub fn load_data(cfg: &ExperimentConfig, seeds: &Seeds) -> CliResult<Splits> {
    match cfg.data_source()? {
        DataSource::Simulated(spec) => {
            let g = generate(&DgpSpec { seed: seeds.data, ..spec }).map_err(CliError::core("generate"))?;
            Ok(Splits { train: g.train, val: Some(g.val), test: Some(g.test), constants: g.constants })
        }
        DataSource::Csv { train, val, test } => Ok(Splits {
            train: load_csv_split(cfg, &train)?,
            val: val.map(|p| load_csv_split(cfg, &p)).transpose()?,
            test: test.map(|p| load_csv_split(cfg, &p)).transpose()?,
            constants: Vec::new(),
        }),
    }
}

/// Freshly initialised model for `data`.
pub fn init_model(cfg: &ExperimentConfig, data: &Dataset, seeds: &Seeds) -> CliResult<StoNetModel> {
    let mc = cfg.model_config(data, seeds.model)?;
    build_model(&mc).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: StoNetModel,
    pub log: TrainLog,
    pub schedule: TrainSchedule,
}

pub fn fit(cfg: &ExperimentConfig, data: &Dataset, seeds: &Seeds, clock: &dyn Fn() -> f64) -> CliResult<Fitted> {
    let model = init_model(cfg, data, seeds)?;
    let schedule = cfg.train_schedule(&model, data.n())?;
    let prior = cfg.prior_hyper()?;
    let mut rng = substream(seeds.train, 0);
    let out = train(model, data, &schedule, prior.as_ref(), &mut rng, clock).map_err(CliError::core("train"))?;
    Ok(Fitted { model: out.model, log: out.log, schedule })
}

/// One estimated treatment component of a continuous design against truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginalCheck {
    pub estimate: f64,
    pub se: f64,
    pub truth_mean: f64,
    /// Spread of the true per-unit effects.
    pub truth_sd: f64,
    pub within_half_sd: bool,
}

/// Compare average marginal effects with the per-unit truth.
pub fn marginal_checks(me: &MarginalEffects, truth: &Matrix) -> Vec<MarginalCheck> {
    (0..truth.cols())
        .map(|j| {
            let col = truth.column(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            MarginalCheck {
                estimate: me.effects[j],
                se: me.se[j],
                truth_mean: mean,
                truth_sd: sd,
                within_half_sd: (me.effects[j] - mean).abs() <= 0.5 * sd,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitReport {
    pub split: String,
    pub n: usize,
    pub psi: Vec<(Vec<f64>, PsiEstimate)>,
    pub ate: Option<f64>,
    pub cate: Option<Vec<f64>>,
    pub marginal: Option<MarginalEffects>,
    pub marginal_checks: Vec<MarginalCheck>,
    /// `(name, value)` pairs, present only when the data carries truth.
    pub metrics: Vec<(String, f64)>,
}

impl SplitReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }
}

pub fn estimate_split(
    cfg: &ExperimentConfig,
    model: &StoNetModel,
    data: &Dataset,
    split: &str,
    seed: u64,
) -> CliResult<SplitReport> {
    let e = &cfg.estimate;
    let stage = format!("estimate ({split})");
    let mut rng = substream(seed, 0);
    let mut report = SplitReport {
        split: split.to_string(),
        n: data.n(),
        psi: Vec::new(),
        ate: None,
        cate: None,
        marginal: None,
        marginal_checks: Vec::new(),
        metrics: Vec::new(),
    };
    match model.treatment {
        TreatmentKind::Binary => {
            let est = binary_effects(model, data, e.draws, seed, &mut rng).map_err(CliError::core(stage.as_str()))?;
            report.psi = est.psi;
            report.ate = est.ate;
            report.cate = est.cate;
        }
        TreatmentKind::Continuous => {
            let me = marginal_effects(model, data, e.draws, e.delta, &mut rng).map_err(CliError::core(stage.as_str()))?;
            report.marginal = Some(me);
        }
    }
    if let Some(grid) = &e.grid {
        report.psi = potential_outcomes(model, data, grid, e.draws, &mut rng).map_err(CliError::core(stage.as_str()))?;
    }
    if let Some(truth) = &data.truth {
        if let (Some(ate), Some(cate), Some(true_cate)) = (report.ate, &report.cate, &truth.true_cate) {
            let true_ate = truth.true_ate.unwrap_or(true_cate.iter().sum::<f64>() / true_cate.len() as f64);
            report.metrics.push(("ate".into(), ate));
            report.metrics.push(("true_ate".into(), true_ate));
            report.metrics.push(("ate_abs_error".into(), (ate - true_ate).abs()));
            report.metrics.push(("pehe".into(), pehe(cate, true_cate).map_err(CliError::core(stage.as_str()))?));
        }
        if let (Some(me), Some(t)) = (&report.marginal, &truth.marginal_effects) {
            let checks = marginal_checks(me, t);
            let k = checks.len() as f64;
            let hits = checks.iter().filter(|c| c.within_half_sd).count() as f64;
            let mae = checks.iter().map(|c| (c.estimate - c.truth_mean).abs()).sum::<f64>() / k;
            report.metrics.push(("marginal_within_half_sd".into(), hits / k));
            report.metrics.push(("marginal_mae".into(), mae));
            report.marginal_checks = checks;
        }
    }
    Ok(report)
}

/// Split name used for train + validation.
pub const IN_SAMPLE: &str = "in_sample";
/// Split name used for the test set.
pub const OUT_OF_SAMPLE: &str = "out_of_sample";

/// Estimate on the in-sample and (when present) test splits.
pub fn estimate_all(
    cfg: &ExperimentConfig,
    model: &StoNetModel,
    splits: &Splits,
    seeds: &Seeds,
) -> CliResult<Vec<SplitReport>> {
    let mut out = vec![estimate_split(cfg, model, &splits.in_sample()?, IN_SAMPLE, derive_seed(seeds.estimate, 0))?];
    if let Some(test) = &splits.test {
        out.push(estimate_split(cfg, model, test, OUT_OF_SAMPLE, derive_seed(seeds.estimate, 1))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seed: u64,
    pub reports: Vec<SplitReport>,
}

/// Generate (or load), train and estimate for one replication.
pub fn run_replication(cfg: &ExperimentConfig, replication: usize) -> CliResult<ReplicationResult> {
    let seeds = Seeds::for_replication(cfg.seed, replication);
    let splits = load_data(cfg, &seeds)?;
    let fitted = fit(cfg, &splits.train, &seeds, &|| 0.0).map_err(|e| with_replication(e, replication))?;
    let reports = estimate_all(cfg, &fitted.model, &splits, &seeds).map_err(|e| with_replication(e, replication))?;
    Ok(ReplicationResult { replication, seed: seeds.replication, reports })
}

fn with_replication(e: CliError, r: usize) -> CliError {
    match e {
        CliError::Core { stage, source } => CliError::Core { stage: format!("replication {r}: {stage}"), source },
        other => other,
    }
}

/// Pool sized by `CI_STONET_THREADS` (rayon's default when unset).
pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(e.to_string()))
}

/// All replications, in replication order regardless of scheduling.
pub fn benchmark(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> CliResult<Vec<ReplicationResult>> {
    pool.install(|| (0..cfg.replications).into_par_iter().map(|r| run_replication(cfg, r)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub in_sample_mean: Option<f64>,
    pub in_sample_sd: Option<f64>,
    pub out_of_sample_mean: Option<f64>,
    pub out_of_sample_sd: Option<f64>,
    pub replications: usize,
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() < 2 { 0.0 } else { (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt() };
    (Some(m), Some(sd))
}

/// Mean and SD of every metric across replications, in- and out-of-sample
/// side by side.
pub fn summarize(results: &[ReplicationResult]) -> Vec<SummaryRow> {
    let mut names: Vec<String> = Vec::new();
    for r in results {
        for rep in &r.reports {
            for (k, _) in &rep.metrics {
                if !names.contains(k) {
                    names.push(k.clone());
                }
            }
        }
    }
    let collect = |name: &str, split: &str| -> Vec<f64> {
        results
            .iter()
            .flat_map(|r| r.reports.iter().filter(|s| s.split == split))
            .filter_map(|s| s.metric(name))
            .collect()
    };
    names
        .into_iter()
        .map(|name| {
            let (im, isd) = mean_sd(&collect(&name, IN_SAMPLE));
            let (om, osd) = mean_sd(&collect(&name, OUT_OF_SAMPLE));
            SummaryRow {
                metric: name,
                in_sample_mean: im,
                in_sample_sd: isd,
                out_of_sample_mean: om,
                out_of_sample_sd: osd,
                replications: results.len(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// `runs.csv` (long format) and `summary.csv` (one row per metric).
pub fn write_benchmark(dir: &Path, manifest: &Manifest, results: &[ReplicationResult]) -> CliResult<()> {
    let rows = results.iter().flat_map(|r| {
        r.reports.iter().flat_map(move |s| {
            s.metrics.iter().map(move |(k, v)| {
                vec![r.replication.to_string(), r.seed.to_string(), s.split.clone(), k.clone(), fmt(*v)]
            })
        })
    });
    csvio::write_table(
        &dir.join("runs.csv"),
        manifest,
        &strs(&["replication", "seed", "split", "metric", "value"]),
        rows,
    )?;
    let summary = summarize(results);
    csvio::write_table(
        &dir.join("summary.csv"),
        manifest,
        &strs(&[
            "method",
            "metric",
            "in_sample_mean",
            "in_sample_sd",
            "out_of_sample_mean",
            "out_of_sample_sd",
            "replications",
        ]),
        summary.iter().map(|s| {
            vec![
                "ci_stonet".to_string(),
                s.metric.clone(),
                opt(s.in_sample_mean),
                opt(s.in_sample_sd),
                opt(s.out_of_sample_mean),
                opt(s.out_of_sample_sd),
                s.replications.to_string(),
            ]
        }),
    )
}

/// Estimation outputs: `psi.csv`, `metrics.csv`, plus `cate.csv` or
/// `marginal.csv` depending on the treatment type.
pub fn write_estimates(dir: &Path, manifest: &Manifest, reports: &[SplitReport], d_a: usize) -> CliResult<()> {
    let mut header = vec!["split".to_string()];
    header.extend((1..=d_a).map(|j| format!("a_{j}")));
    header.extend(strs(&["psi", "se"]));
    let rows = reports.iter().flat_map(|r| {
        r.psi.iter().map(move |(a, p)| {
            let mut row = vec![r.split.clone()];
            row.extend(a.iter().map(|&v| fmt(v)));
            row.push(fmt(p.value));
            row.push(fmt(p.se));
            row
        })
    });
    csvio::write_table(&dir.join("psi.csv"), manifest, &header, rows)?;
    if reports.iter().any(|r| r.cate.is_some()) {
        let rows = reports.iter().flat_map(|r| {
            r.cate.iter().flat_map(move |c| c.iter().enumerate().map(move |(i, v)| vec![r.split.clone(), i.to_string(), fmt(*v)]))
        });
        csvio::write_table(&dir.join("cate.csv"), manifest, &strs(&["split", "unit", "cate"]), rows)?;
    }
    if reports.iter().any(|r| r.marginal.is_some()) {
        let rows = reports.iter().flat_map(|r| {
            r.marginal.iter().flat_map(move |m| {
                (0..m.effects.len()).map(move |j| {
                    let mut row = vec![r.split.clone(), (j + 1).to_string(), fmt(m.effects[j]), fmt(m.se[j])];
                    match r.marginal_checks.get(j) {
                        Some(c) => {
                            row.extend([fmt(c.truth_mean), fmt(c.truth_sd), c.within_half_sd.to_string()])
                        }
                        None => row.extend([String::new(), String::new(), String::new()]),
                    }
                    row
                })
            })
        });
        csvio::write_table(
            &dir.join("marginal.csv"),
            manifest,
            &strs(&["split", "treatment", "estimate", "se", "truth_mean", "truth_sd", "within_half_sd"]),
            rows,
        )?;
    }
    let rows = reports
        .iter()
        .flat_map(|r| r.metrics.iter().map(move |(k, v)| vec![r.split.clone(), k.clone(), fmt(*v)]));
    csvio::write_table(&dir.join("metrics.csv"), manifest, &strs(&["split", "metric", "value"]), rows)
}

pub fn write_train_log(path: &Path, manifest: &Manifest, log: &TrainLog) -> CliResult<()> {
    let header = strs(&[
        "epoch",
        "stage",
        "log_density",
        "grad_norm_latent",
        "grad_norm_treatment",
        "grad_norm_outcome",
        "sigma_z2",
        "pruned_frac",
        "seconds",
    ]);
    let rows = log.records.iter().map(|r| {
        vec![
            r.epoch.to_string(),
            r.stage.name().to_string(),
            fmt(r.log_density),
            fmt(r.grad_norms[0]),
            fmt(r.grad_norms[1]),
            fmt(r.grad_norms[2]),
            fmt(r.sigma_z2),
            fmt(r.pruned_frac),
            fmt(r.seconds),
        ]
    });
    csvio::write_table(path, manifest, &header, rows)
}

/// Overlap stress test on the training split.
pub fn overlap(cfg: &ExperimentConfig, model: &StoNetModel, data: &Dataset, seeds: &Seeds) -> CliResult<OverlapReport> {
    let d = &cfg.diagnostics;
    let mut rng = substream(seeds.overlap, 0);
    overlap_stress_test(model, data, d.alpha, d.draws, d.protocol(), &mut rng).map_err(CliError::core("diagnose"))
}

/// Warm-start bootstrap with replicates spread over `pool`. Each replicate
/// owns its RNG stream, so the result matches a serial run exactly.
pub fn bootstrap(
    cfg: &ExperimentConfig,
    model: &StoNetModel,
    data: &Dataset,
    seeds: &Seeds,
    pool: &rayon::ThreadPool,
) -> CliResult<BootstrapResult> {
    let schedule = cfg.train_schedule(model, data.n())?;
    let bc = cfg.bootstrap_config(schedule)?;
    bc.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let seed = seeds.bootstrap;
    let tau_hat = bootstrap_point_estimate(model, data, bc.draws, seed).map_err(CliError::core("bootstrap"))?;
    let taus: Vec<f64> = pool.install(|| {
        (0..bc.replicates)
            .into_par_iter()
            .map(|b| bootstrap_replicate(model, data, &bc, seed, b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::core("bootstrap"))
    })?;
    summarize_bootstrap(tau_hat, taus, bc.level).map_err(CliError::core("bootstrap"))
}
