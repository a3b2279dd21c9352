//! Reproduction experiments run through the same pipeline as the
//! `ci-stonet` binary. Each function returns raw numbers and leaves
//! thresholds to the caller.

use ci_stonet::pipeline::{self, Seeds, OUT_OF_SAMPLE};
use ci_stonet::{CliResult, ExperimentConfig};
use ci_stonet_core::datagen::DgpKind;
use ci_stonet_core::diagnostics::BootstrapResult;

/// Default-sized simulator config with the given master seed.
pub fn config(kind: DgpKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::simulated(kind);
    cfg.seed = seed;
    cfg
}

/// Marginal-effect checks on the test split of one continuous-treatment
/// dataset: `(hits, total)`.
pub fn marginal_hits(kind: DgpKind, seed: u64) -> CliResult<(usize, usize)> {
    let r = pipeline::run_replication(&config(kind, seed), 0)?;
    let checks = r
        .reports
        .iter()
        .find(|s| s.split == OUT_OF_SAMPLE)
        .map(|s| s.marginal_checks.clone())
        .unwrap_or_default();
    Ok((checks.iter().filter(|c| c.within_half_sd).count(), checks.len()))
}

/// Per-replication values of `metric` on the test split.
pub fn test_metric(kind: DgpKind, seed: u64, replications: usize, metric: &str) -> CliResult<Vec<f64>> {
    let mut cfg = config(kind, seed);
    cfg.replications = replications;
    let results = pipeline::benchmark(&cfg, &pipeline::thread_pool()?)?;
    Ok(results
        .iter()
        .flat_map(|r| r.reports.iter().filter(|s| s.split == OUT_OF_SAMPLE))
        .filter_map(|s| s.metric(metric))
        .collect())
}

/// Train on one dataset and bootstrap its ATE with `replicates` warm-start
/// refits.
pub fn bootstrap_interval(kind: DgpKind, seed: u64, replicates: usize) -> CliResult<BootstrapResult> {
    let mut cfg = config(kind, seed);
    cfg.bootstrap.replicates = replicates;
    let seeds = Seeds::for_replication(cfg.seed, 0);
    let splits = pipeline::load_data(&cfg, &seeds)?;
    let fitted = pipeline::fit(&cfg, &splits.train, &seeds, &|| 0.0)?;
    pipeline::bootstrap(&cfg, &fitted.model, &splits.train, &seeds, &pipeline::thread_pool()?)
}

/// Mean extreme-propensity fraction on the training split of a fitted model.
pub fn overlap_score(kind: DgpKind, seed: u64) -> CliResult<f64> {
    let cfg = config(kind, seed);
    let seeds = Seeds::for_replication(cfg.seed, 0);
    let splits = pipeline::load_data(&cfg, &seeds)?;
    let fitted = pipeline::fit(&cfg, &splits.train, &seeds, &|| 0.0)?;
    Ok(pipeline::overlap(&cfg, &fitted.model, &splits.train, &seeds)?.s_bar)
}
