use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spconf_cli::commands::{cmd_fit, cmd_simulate, cmd_summarize, FitArgs};
use spconf_cli::{
    ingest_dataset, parse_models, resolve_scenario, CliError, ConfigFile, MapSource, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "spconf",
    version,
    about = "Fixed-effect estimation for Poisson areal regression under spatial confounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Structured config file ([priors]/[mcmc]/[scenario] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of MCMC chains.
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain.
    #[arg(long)]
    iters: Option<usize>,
    /// Burn-in iterations per chain.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Thinning interval.
    #[arg(long)]
    thin: Option<usize>,
    /// Worker threads (0 = automatic; SPCONF_WORKERS sets the default).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit models to a real dataset.
    Fit {
        /// Area CSV: id, observed, expected, covariates..., lon, lat.
        #[arg(long)]
        data: PathBuf,
        /// Adjacency file (edge list or GAL).
        #[arg(long)]
        adj: PathBuf,
        /// Comma-separated model list, e.g. Null,Spatial,RSR,SpatPlus10.
        #[arg(long)]
        models: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-model retained-sample archives.
        #[arg(long, default_value_t = false)]
        samples: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run one simulation-study cell.
    Simulate {
        /// Scenario number (1-4).
        #[arg(long)]
        scenario: u8,
        /// Target correlation between the observed and hidden covariates.
        #[arg(long)]
        cor: f64,
        /// Study 1 (hidden covariate) or 2 (Type-S, beta2 = 0).
        #[arg(long, default_value_t = 1)]
        study: u8,
        /// Number of replicate datasets.
        #[arg(long, default_value_t = 100, value_name = "K")]
        k: usize,
        /// Comma-separated model list.
        #[arg(long)]
        models: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Synthetic map spec, e.g. lattice:10x7.
        #[arg(long, conflicts_with_all = ["data", "adj"])]
        map: Option<String>,
        /// Area CSV supplying the map, covariate and expected counts.
        #[arg(long, requires = "adj")]
        data: Option<PathBuf>,
        /// Adjacency file for --data.
        #[arg(long, requires = "data")]
        adj: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Re-aggregate replicate CSVs into a study summary.
    Summarize {
        /// Directory holding replicates.csv (and optionally true_risks.csv).
        #[arg(long, value_name = "DIR")]
        r#in: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        #[arg(long, default_value_t = 0.8)]
        cor: f64,
        #[arg(long, default_value_t = 1)]
        study: u8,
        /// True beta1 used by bias metrics.
        #[arg(long, default_value_t = 0.2)]
        beta1: f64,
    },
}

fn load_config(common: &CommonOpts) -> Result<ConfigFile, CliError> {
    match &common.config {
        Some(path) => ConfigFile::load(path),
        None => Ok(ConfigFile::default()),
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap already formatted the message; print and classify as usage.
        let _ = e.print();
        CliError::Usage(String::new())
    })?;
    match cli.command {
        Command::Fit {
            data,
            adj,
            models,
            out,
            samples,
            common,
        } => {
            let file = load_config(&common)?;
            let run_cfg = RunConfig::from_sources(
                &file,
                common.seed,
                common.chains,
                common.iters,
                common.burn_in,
                common.thin,
                common.workers,
                &out,
            )?;
            let models = parse_models(&models)?;
            let (dataset, graph) = ingest_dataset(&data, &adj)?;
            let nonconverged = cmd_fit(
                &dataset,
                &graph,
                &FitArgs {
                    models,
                    write_samples: samples,
                },
                &run_cfg,
            )?;
            if nonconverged > 0 {
                eprintln!("warning: {nonconverged} fits flagged as nonconverged (see summary.csv)");
            }
            Ok(())
        }
        Command::Simulate {
            scenario,
            cor,
            study,
            k,
            models,
            out,
            map,
            data,
            adj,
            common,
        } => {
            let file = load_config(&common)?;
            let run_cfg = RunConfig::from_sources(
                &file,
                common.seed,
                common.chains,
                common.iters,
                common.burn_in,
                common.thin,
                common.workers,
                &out,
            )?;
            let models = parse_models(&models)?;
            let source = match (map, data, adj) {
                (Some(spec), None, None) => {
                    let (rows, cols) = MapSource::parse_lattice(&spec)?;
                    MapSource::Lattice { rows, cols }
                }
                (None, Some(d), Some(a)) => MapSource::Files { data: d, adj: a },
                (None, None, None) => MapSource::Lattice { rows: 10, cols: 7 },
                _ => {
                    return Err(CliError::Usage(
                        "give either --map lattice:RxC or --data with --adj".into(),
                    ))
                }
            };
            let spec = resolve_scenario(&file, scenario, cor, study, k, run_cfg.mcmc.seed)?;
            let study_map = source.build(run_cfg.mcmc.seed)?;
            cmd_simulate(&spec, &study_map, &models, &run_cfg)?;
            Ok(())
        }
        Command::Summarize {
            r#in,
            out,
            scenario,
            cor,
            study,
            beta1,
        } => cmd_summarize(&r#in, &out, scenario, cor, study, (beta1, 0.0)),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(&e, CliError::Usage(msg) if msg.is_empty()) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
