//! CSV tables. Every file starts with a `#` manifest line naming the
//! artifact version, config hash and seed; readers skip `#` lines.
//!
//! Dataset tables use `a_1..`, `y_1..` and `x_1..` columns. Truth tables hold
//! `tau` (per-unit effect), `z_1..` (true confounders) and `me_1..`
//! (per-unit marginal effects), whichever are known.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ci_stonet_core::model::{Dataset, Truth};
use ci_stonet_core::Matrix;

use crate::error::{CliError, CliResult};

/// Provenance written as the first line of every CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Manifest {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Manifest { version: env!("CARGO_PKG_VERSION").to_string(), config_hash: config_hash.into(), seed }
    }

    pub fn line(&self) -> String {
        format!("# ci-stonet version={} config={} seed={}", self.version, self.config_hash, self.seed)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ci-stonet ")?;
        let mut version = None;
        let mut hash = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=')? {
                ("version", v) => version = Some(v.to_string()),
                ("config", v) => hash = Some(v.to_string()),
                ("seed", v) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Some(Manifest { version: version?, config_hash: hash?, seed: seed? })
    }
}

/// Write a table with a manifest line. Floats use Rust's shortest
/// round-trip formatting so values read back bit-identically.
pub fn write_table<I>(path: &Path, manifest: &Manifest, header: &[String], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", manifest.line()).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}

fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |j| format!("{prefix}{j}"))
}

pub fn write_dataset(path: &Path, data: &Dataset, manifest: &Manifest) -> CliResult<()> {
    let header: Vec<String> =
        numbered("a_", data.d_a()).chain(numbered("y_", data.d_y())).chain(numbered("x_", data.d_x())).collect();
    let rows = (0..data.n()).map(|i| {
        let mut r: Vec<String> = data.a.row(i).iter().chain(data.y.row(i)).map(|&v| fmt(v)).collect();
        if let Some(x) = &data.x {
            r.extend(x.row(i).iter().map(|&v| fmt(v)));
        }
        r
    });
    write_table(path, manifest, &header, rows)
}

/// Write whatever per-unit truth `data` carries; returns `false` (and writes
/// nothing) when there is none.
pub fn write_truth(path: &Path, data: &Dataset, manifest: &Manifest) -> CliResult<bool> {
    let Some(t) = &data.truth else { return Ok(false) };
    let mut header = Vec::new();
    if t.true_cate.is_some() {
        header.push("tau".to_string());
    }
    if let Some(z) = &t.true_z {
        header.extend(numbered("z_", z.cols()));
    }
    if let Some(m) = &t.marginal_effects {
        header.extend(numbered("me_", m.cols()));
    }
    if header.is_empty() {
        return Ok(false);
    }
    let rows = (0..data.n()).map(|i| {
        let mut r = Vec::with_capacity(header.len());
        if let Some(c) = &t.true_cate {
            r.push(fmt(c[i]));
        }
        for m in [&t.true_z, &t.marginal_effects].into_iter().flatten() {
            r.extend(m.row(i).iter().map(|&v| fmt(v)));
        }
        r
    });
    write_table(path, manifest, &header, rows)?;
    Ok(true)
}

/// Which columns of a table play which role.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schema {
    pub treatment: Vec<String>,
    pub outcome: Vec<String>,
    /// Empty when the data has no proxies.
    pub proxy: Vec<String>,
}

impl Schema {
    /// Roles from the `a_`, `y_`, `x_` prefixes, in header order.
    pub fn from_prefixes(header: &[String]) -> Self {
        let pick = |p: &str| header.iter().filter(|h| h.starts_with(p)).cloned().collect();
        Schema { treatment: pick("a_"), outcome: pick("y_"), proxy: pick("x_") }
    }
}

/// A parsed numeric table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub manifest: Option<Manifest>,
    pub header: Vec<String>,
    /// Row-major cells.
    pub values: Vec<f64>,
    pub rows: usize,
}

impl Table {
    fn column_index(&self, path: &Path, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::schema(path, format!("missing column `{name}`")))
    }

    /// Gather `names` into an `rows x names.len()` matrix.
    pub fn columns(&self, path: &Path, names: &[String]) -> CliResult<Matrix> {
        let idx = names.iter().map(|n| self.column_index(path, n)).collect::<CliResult<Vec<_>>>()?;
        let w = self.header.len();
        let mut out = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            out.extend(idx.iter().map(|&j| self.values[i * w + j]));
        }
        Matrix::from_vec(self.rows, idx.len(), out).map_err(|e| CliError::schema(path, e.to_string()))
    }
}

/// Strict numeric CSV reader: every cell must parse as a finite float and
/// every row must have the header's width.
pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let manifest = text.lines().next().and_then(Manifest::parse);
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::schema(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().any(String::is_empty) {
        return Err(CliError::schema(path, "empty header or blank column name"));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::schema(path, e.to_string()))?;
        let line = rec.position().map_or(r + 2, |p| p.line() as usize);
        for (cell, name) in rec.iter().zip(&header) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                CliError::schema(path, format!("line {line}, column `{name}`: `{cell}` is not a number"))
            })?;
            if !v.is_finite() {
                return Err(CliError::schema(path, format!("line {line}, column `{name}`: non-finite value")));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::schema(path, "no data rows"));
    }
    Ok(Table { manifest, header, values, rows })
}

/// Load a dataset (without truth) whose columns follow `schema`.
pub fn load_dataset_csv(path: &Path, schema: &Schema) -> CliResult<Dataset> {
    if schema.treatment.is_empty() {
        return Err(CliError::schema(path, "no treatment columns"));
    }
    if schema.outcome.is_empty() {
        return Err(CliError::schema(path, "no outcome column"));
    }
    let table = read_table(path)?;
    let a = table.columns(path, &schema.treatment)?;
    let y = table.columns(path, &schema.outcome)?;
    let x = if schema.proxy.is_empty() { None } else { Some(table.columns(path, &schema.proxy)?) };
    Dataset::new(a, y, x).map_err(|e| CliError::schema(path, e.to_string()))
}

/// Load a dataset whose roles follow the column prefixes.
pub fn load_prefixed_dataset(path: &Path) -> CliResult<Dataset> {
    let table = read_table(path)?;
    let schema = Schema::from_prefixes(&table.header);
    if schema.treatment.is_empty() || schema.outcome.is_empty() {
        return Err(CliError::schema(path, "expected `a_` treatment and `y_` outcome columns"));
    }
    let a = table.columns(path, &schema.treatment)?;
    let y = table.columns(path, &schema.outcome)?;
    let x = if schema.proxy.is_empty() { None } else { Some(table.columns(path, &schema.proxy)?) };
    Dataset::new(a, y, x).map_err(|e| CliError::schema(path, e.to_string()))
}

/// Read a truth table written by [`write_truth`]. `true_ate` is the mean of
/// `tau` when present.
pub fn load_truth_csv(path: &Path) -> CliResult<Truth> {
    let table = read_table(path)?;
    let with = |p: &str| -> Vec<String> { table.header.iter().filter(|h| h.starts_with(p)).cloned().collect() };
    let mut truth = Truth::default();
    if table.header.iter().any(|h| h == "tau") {
        let tau = table.columns(path, &["tau".to_string()])?.into_vec();
        truth.true_ate = Some(tau.iter().sum::<f64>() / tau.len() as f64);
        truth.true_cate = Some(tau);
    }
    let z = with("z_");
    if !z.is_empty() {
        truth.true_z = Some(table.columns(path, &z)?);
    }
    let me = with("me_");
    if !me.is_empty() {
        truth.marginal_effects = Some(table.columns(path, &me)?);
    }
    Ok(truth)
}
