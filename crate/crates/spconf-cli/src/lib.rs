//! Command implementations behind the `spconf` binary: dataset ingestion,
//! run configuration, and CSV emission for the fit / simulate / summarize
//! commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use thiserror::Error;

use spconf::areal::{load_graph, AreaGraph};
use spconf::inference::{Dataset, McmcConfig, PriorSpec};
use spconf::metrics::{ReplicateRecord, StudySummary};
use spconf::simstudy::{desk_map, ModelChoice, ScenarioSpec, StudyMap};

pub mod commands;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Model(#[from] spconf::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Model(spconf::Error::Numeric(_)) => 3,
            CliError::Model(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Environment variable naming the default worker count.
pub const WORKERS_ENV: &str = "SPCONF_WORKERS";

pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Key-value configuration file with `[section]` headers, `#` comments and
/// `key = value` lines. Flags override file values, file values override
/// defaults.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Data(format!("config line {}: expected key = value", idx + 1))
            })?;
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            values.insert(full, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Data(format!("config key {key}: invalid value {raw:?}"))),
        }
    }

    /// Canonical text representation used for the manifest hash.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Resolved settings for one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub prior: PriorSpec,
    pub mcmc: McmcConfig,
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl RunConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn from_sources(
        file: &ConfigFile,
        seed: Option<u64>,
        chains: Option<usize>,
        iters: Option<usize>,
        burn_in: Option<usize>,
        thin: Option<usize>,
        workers: Option<usize>,
        out_dir: &Path,
    ) -> CliResult<Self> {
        let mut prior = PriorSpec::default();
        if let Some(v) = file.get_parsed::<f64>("priors.beta_precision")? {
            prior.beta_precision = v;
        }
        if let Some(v) = file.get_parsed::<f64>("priors.alpha_precision")? {
            prior.alpha_precision = v;
        }
        if let Some(v) = file.get_parsed::<f64>("priors.sigma_upper")? {
            prior.sigma_upper = v;
        }
        let mut mcmc = McmcConfig::default();
        if let Some(v) = file.get_parsed::<usize>("mcmc.chains")? {
            mcmc.chains = v;
        }
        if let Some(v) = file.get_parsed::<usize>("mcmc.iterations")? {
            mcmc.iterations = v;
        }
        if let Some(v) = file.get_parsed::<usize>("mcmc.burn_in")? {
            mcmc.burn_in = v;
        }
        if let Some(v) = file.get_parsed::<usize>("mcmc.thin")? {
            mcmc.thin = v;
        }
        if let Some(v) = file.get_parsed::<u64>("mcmc.seed")? {
            mcmc.seed = v;
        }
        // Flags take precedence over the file.
        if let Some(v) = chains {
            mcmc.chains = v;
        }
        if let Some(v) = iters {
            mcmc.iterations = v;
        }
        if let Some(v) = burn_in {
            mcmc.burn_in = v;
        }
        if let Some(v) = thin {
            mcmc.thin = v;
        }
        if let Some(v) = seed {
            mcmc.seed = v;
        }
        mcmc.validate().map_err(CliError::Model)?;
        prior.validate().map_err(CliError::Model)?;
        let workers = workers
            .or_else(|| file.get_parsed::<usize>("run.workers").ok().flatten())
            .unwrap_or_else(default_workers);
        Ok(RunConfig {
            prior,
            mcmc,
            workers,
            out_dir: out_dir.to_path_buf(),
        })
    }
}

/// Read an area CSV (`id, observed, expected, covariates..., lon, lat`) and
/// its adjacency file into a dataset and graph.
pub fn ingest_dataset(area_csv: &Path, adjacency: &Path) -> CliResult<(Dataset, AreaGraph)> {
    let text = fs::read_to_string(area_csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", area_csv.display())))?;
    let adj_text = fs::read_to_string(adjacency)
        .map_err(|e| CliError::Data(format!("{}: {e}", adjacency.display())))?;
    let graph = load_graph(&adj_text).map_err(CliError::Model)?;
    let dataset = parse_area_csv(&text)?;
    if dataset.n() != graph.n() {
        return Err(CliError::Data(format!(
            "area file has {} rows but adjacency describes {} areas",
            dataset.n(),
            graph.n()
        )));
    }
    Ok((dataset, graph))
}

pub fn parse_area_csv(text: &str) -> CliResult<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::Data("empty area file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 6 {
        return Err(CliError::Data(format!(
            "need at least 6 columns (id, observed, expected, covariate..., lon, lat), got {}",
            columns.len()
        )));
    }
    let p = columns.len() - 5;
    let mut labels = Vec::new();
    let mut y = Vec::new();
    let mut e = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut centroids = Vec::new();
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(CliError::Data(format!(
                "row {}: {} cells, expected {}",
                idx + 1,
                cells.len(),
                columns.len()
            )));
        }
        let num = |col: usize| -> CliResult<f64> {
            cells[col].parse().map_err(|_| {
                CliError::Data(format!(
                    "row {}, column {} ({}): invalid number {:?}",
                    idx + 1,
                    col + 1,
                    columns[col],
                    cells[col]
                ))
            })
        };
        labels.push(cells[0].to_string());
        let obs = num(1)?;
        if obs < 0.0 || obs.fract() != 0.0 {
            return Err(CliError::Data(format!(
                "row {}: observed count must be a nonnegative integer",
                idx + 1
            )));
        }
        y.push(obs as u64);
        e.push(num(2)?);
        let mut row = Vec::with_capacity(p);
        for j in 0..p {
            row.push(num(3 + j)?);
        }
        x_rows.push(row);
        centroids.push((num(3 + p)?, num(4 + p)?));
    }
    let n = labels.len();
    if n == 0 {
        return Err(CliError::Data("area file has no data rows".into()));
    }
    let mut x = DMatrix::zeros(n, p);
    for (i, row) in x_rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    Dataset::new(y, e, x, centroids, labels).map_err(CliError::Model)
}

/// Serialize a dataset back to the area CSV schema using the raw
/// (unstandardized) covariates, so ingest(emit(d)) is bit-identical.
pub fn emit_area_csv(d: &Dataset, covariate_names: &[String]) -> String {
    let mut out = String::from("id,observed,expected");
    for name in covariate_names {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",lon,lat\n");
    for i in 0..d.n() {
        let _ = write!(out, "{},{},{}", d.labels[i], d.y[i], d.e[i]);
        for j in 0..d.p() {
            let _ = write!(out, ",{}", d.x_raw[(i, j)]);
        }
        let _ = writeln!(out, ",{},{}", d.centroids[i].0, d.centroids[i].1);
    }
    out
}

/// FNV-1a hash over the canonical configuration text, printed in the manifest.
pub fn config_hash(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for part in parts {
        for &b in part.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Where a simulate command runs: a synthetic lattice or a user-supplied map.
pub enum MapSource {
    Lattice { rows: usize, cols: usize },
    Files { data: PathBuf, adj: PathBuf },
}

impl MapSource {
    pub fn parse_lattice(spec: &str) -> CliResult<(usize, usize)> {
        let dims = spec
            .strip_prefix("lattice:")
            .ok_or_else(|| CliError::Usage(format!("bad map spec {spec:?}, want lattice:RxC")))?;
        let (r, c) = dims
            .split_once(['x', 'X'])
            .ok_or_else(|| CliError::Usage(format!("bad lattice dims {dims:?}")))?;
        let rows = r
            .parse()
            .map_err(|_| CliError::Usage(format!("bad row count {r:?}")))?;
        let cols = c
            .parse()
            .map_err(|_| CliError::Usage(format!("bad column count {c:?}")))?;
        Ok((rows, cols))
    }

    pub fn build(&self, seed: u64) -> CliResult<StudyMap> {
        match self {
            MapSource::Lattice { rows, cols } => {
                desk_map(*rows, *cols, seed).map_err(CliError::Model)
            }
            MapSource::Files { data, adj } => {
                let (dataset, graph) = ingest_dataset(data, adj)?;
                if dataset.p() < 1 {
                    return Err(CliError::Data(
                        "map dataset needs a covariate column for x1".into(),
                    ));
                }
                let x1: Vec<f64> = dataset.x.column(0).iter().copied().collect();
                Ok(StudyMap {
                    graph,
                    centroids: dataset.centroids.clone(),
                    x1,
                    e: dataset.e.clone(),
                })
            }
        }
    }
}

/// Long-format study CSV: scenario, subscenario, study, model, metric, value.
pub fn study_summary_csv(summary: &StudySummary) -> String {
    let mut out = String::from("scenario,cor,study,model,metric,value\n");
    for (scenario, cor, study, model, metric, value) in summary.rows() {
        let _ = writeln!(out, "{scenario},{cor},{study},{model},{metric},{value}");
    }
    let _ = writeln!(
        out,
        "{},{},{},_study,achieved_correlation,{}",
        summary.scenario, summary.correlation_target, summary.study, summary.achieved_correlation
    );
    out
}

/// Per-replicate raw CSV of the parameters the metric suite consumes.
pub fn replicate_csv(records: &[ReplicateRecord]) -> String {
    let mut out = String::from("replicate,model,parameter,mean,sd,q025,q975,waic,converged\n");
    for rec in records {
        for (name, (mean, sd, lo, hi)) in &rec.params {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                rec.replicate, rec.model, name, mean, sd, lo, hi, rec.waic, rec.converged
            );
        }
    }
    out
}

/// Rebuild a record set from the replicate CSV (the summarize command).
pub fn parse_replicate_csv(text: &str) -> CliResult<Vec<ReplicateRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data("empty replicate file".into()))?;
    if !header.starts_with("replicate,model,parameter") {
        return Err(CliError::Data("unrecognized replicate CSV header".into()));
    }
    let mut map: BTreeMap<(usize, String), ReplicateRecord> = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(CliError::Data(format!(
                "replicate row {}: expected 9 cells",
                idx + 2
            )));
        }
        let rep: usize = cells[0]
            .parse()
            .map_err(|_| CliError::Data(format!("row {}: bad replicate id", idx + 2)))?;
        let model = cells[1].to_string();
        let parse_f = |cell: &str| -> CliResult<f64> {
            cell.parse()
                .map_err(|_| CliError::Data(format!("row {}: bad number {cell:?}", idx + 2)))
        };
        let entry = map
            .entry((rep, model.clone()))
            .or_insert_with(|| ReplicateRecord {
                replicate: rep,
                model,
                params: BTreeMap::new(),
                risk_mean: Vec::new(),
                waic: 0.0,
                converged: true,
            });
        entry.params.insert(
            cells[2].to_string(),
            (
                parse_f(cells[3])?,
                parse_f(cells[4])?,
                parse_f(cells[5])?,
                parse_f(cells[6])?,
            ),
        );
        entry.waic = parse_f(cells[7])?;
        entry.converged = cells[8] == "true";
    }
    Ok(map.into_values().collect())
}

/// Scenario settings resolved from flags and config.
pub fn resolve_scenario(
    file: &ConfigFile,
    scenario: u8,
    cor: f64,
    study: u8,
    replicates: usize,
    seed: u64,
) -> CliResult<ScenarioSpec> {
    let mut spec = ScenarioSpec::new(scenario, cor, study);
    spec.replicates = replicates;
    spec.seed = seed;
    if let Some(v) = file.get_parsed::<f64>("scenario.sigma2")? {
        spec.sigma2 = v;
    }
    if let Some(v) = file.get_parsed::<f64>("scenario.beta1")? {
        spec.beta_truth.0 = v;
    }
    if let Some(v) = file.get_parsed::<f64>("scenario.beta2")? {
        if study != 2 {
            spec.beta_truth.1 = v;
        }
    }
    if let Some(v) = file.get_parsed::<f64>("scenario.lambda_s1")? {
        spec.spline_lambdas.0 = v;
    }
    if let Some(v) = file.get_parsed::<f64>("scenario.lambda_s2")? {
        spec.spline_lambdas.1 = v;
    }
    spec.validate().map_err(CliError::Model)?;
    Ok(spec)
}

pub fn parse_models(list: &str) -> CliResult<Vec<ModelChoice>> {
    spconf::simstudy::parse_model_list(list).map_err(CliError::Model)
}
