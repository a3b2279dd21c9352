//! Subcommands: each reads the config, does one job and writes its
//! artifacts under `output_dir`.

use std::path::Path;
use std::time::Instant;

use ci_stonet_core::model::Dataset;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DataSource, ExperimentConfig};
use crate::csvio::{self, Manifest};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, Seeds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Generate,
    Train,
    Estimate,
    Diagnose,
    Bootstrap,
    Benchmark,
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> CliResult<()> {
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let manifest = Manifest::new(cfg.hash(), cfg.seed);
    match cmd {
        Command::Generate => generate(cfg, out, &manifest),
        Command::Train => train(cfg, out, &manifest),
        Command::Estimate => estimate(cfg, out, &manifest),
        Command::Diagnose => diagnose(cfg, out),
        Command::Bootstrap => bootstrap(cfg, out),
        Command::Benchmark => {
            let pool = pipeline::thread_pool()?;
            let results = pipeline::benchmark(cfg, &pool)?;
            pipeline::write_benchmark(out, &manifest, &results)
        }
    }
}

#[derive(Serialize)]
struct DataManifest<'a> {
    kind: &'a str,
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    constants: &'a [(String, f64)],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn generate(cfg: &ExperimentConfig, out: &Path, manifest: &Manifest) -> CliResult<()> {
    let DataSource::Simulated(spec) = cfg.data_source()? else {
        return Err(CliError::Config("generate needs a simulator in data.kind".into()));
    };
    let seeds = Seeds::for_replication(cfg.seed, 0);
    let splits = pipeline::load_data(cfg, &seeds)?;
    let dir = out.join("data");
    let parts: [(&str, Option<&Dataset>); 3] =
        [("train", Some(&splits.train)), ("val", splits.val.as_ref()), ("test", splits.test.as_ref())];
    for (name, data) in parts {
        let Some(data) = data else { continue };
        let path = dir.join(format!("{name}.csv"));
        csvio::write_dataset(&path, data, manifest)?;
        csvio::write_truth(&pipeline::truth_path(&path), data, manifest)?;
    }
    write_json(
        &dir.join("dataset.json"),
        &DataManifest {
            kind: spec.kind.name(),
            seed: seeds.data,
            n_train: spec.n_train,
            n_val: spec.n_val,
            n_test: spec.n_test,
            constants: &splits.constants,
        },
    )
}

fn train(cfg: &ExperimentConfig, out: &Path, manifest: &Manifest) -> CliResult<()> {
    let seeds = Seeds::for_replication(cfg.seed, 0);
    let splits = pipeline::load_data(cfg, &seeds)?;
    let start = Instant::now();
    let fitted = pipeline::fit(cfg, &splits.train, &seeds, &|| start.elapsed().as_secs_f64())?;
    checkpoint::save(&Checkpoint::new(fitted.model, cfg.hash(), cfg.seed), &cfg.checkpoint_path())?;
    pipeline::write_train_log(&out.join("train_log.csv"), manifest, &fitted.log)
}

fn load_trained(cfg: &ExperimentConfig) -> CliResult<(Checkpoint, pipeline::Splits, Seeds)> {
    let ckpt = checkpoint::load(&cfg.checkpoint_path())?;
    let seeds = Seeds::for_replication(cfg.seed, 0);
    let splits = pipeline::load_data(cfg, &seeds)?;
    ckpt.model.check_data(&splits.train).map_err(|e| CliError::Checkpoint {
        path: cfg.checkpoint_path(),
        message: format!("model does not fit the configured data: {e}"),
    })?;
    Ok((ckpt, splits, seeds))
}

fn estimate(cfg: &ExperimentConfig, out: &Path, manifest: &Manifest) -> CliResult<()> {
    let (ckpt, splits, seeds) = load_trained(cfg)?;
    let reports = pipeline::estimate_all(cfg, &ckpt.model, &splits, &seeds)?;
    pipeline::write_estimates(out, manifest, &reports, ckpt.model.d_a)
}

fn diagnose(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let (ckpt, splits, seeds) = load_trained(cfg)?;
    let report = pipeline::overlap(cfg, &ckpt.model, &splits.train, &seeds)?;
    write_json(&out.join("overlap.json"), &report)
}

fn bootstrap(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let (ckpt, splits, seeds) = load_trained(cfg)?;
    let pool = pipeline::thread_pool()?;
    let result = pipeline::bootstrap(cfg, &ckpt.model, &splits.train, &seeds, &pool)?;
    write_json(&out.join("bootstrap.json"), &result)
}
