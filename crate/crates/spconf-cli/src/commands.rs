//! The fit, simulate and summarize commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use spconf::areal::{icar_precision, AreaGraph};
use spconf::inference::{
    fit_null, fit_rsr_with_weights, fit_spatial_icar, fit_spatial_plus_with_weights,
    fit_spatial_pspline, Dataset, FittedWeights, PosteriorSummary, PsplineSpec,
    SpatialPlusCovariateModel, SpatialPlusFinal,
};
use spconf::metrics::ReplicateRecord;
use spconf::simstudy::{run_study, ModelChoice, ScenarioSpec, StudyMap};
use spconf::tgmrf::fit_tgmrf;

use crate::{
    config_hash, replicate_csv, study_summary_csv, CliError, CliResult, RunConfig,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_out(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn manifest(run: &RunConfig, command: &str, extras: &[(&str, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "command={command}");
    let _ = writeln!(out, "version={VERSION}");
    let _ = writeln!(out, "seed={}", run.mcmc.seed);
    let _ = writeln!(
        out,
        "mcmc=chains:{},iterations:{},burn_in:{},thin:{}",
        run.mcmc.chains, run.mcmc.iterations, run.mcmc.burn_in, run.mcmc.thin
    );
    let _ = writeln!(
        out,
        "priors=beta_precision:{},alpha_precision:{},sigma_upper:{}",
        run.prior.beta_precision, run.prior.alpha_precision, run.prior.sigma_upper
    );
    let _ = writeln!(out, "workers={}", run.workers);
    for (k, v) in extras {
        let _ = writeln!(out, "{k}={v}");
    }
    let hash = config_hash(&[command, &out]);
    let _ = writeln!(out, "config_hash={hash:016x}");
    out
}

/// Fit one named model on a real dataset.
fn fit_model_on_data(
    model: &ModelChoice,
    data: &Dataset,
    graph: &AreaGraph,
    weights: Option<&FittedWeights>,
    run: &RunConfig,
) -> CliResult<PosteriorSummary> {
    let qp = icar_precision(graph);
    let pspline = PsplineSpec::default();
    let fit_seed = run.mcmc.seed.wrapping_add(seed_offset(&model.label()));
    let cfg = run.mcmc.with_seed(fit_seed);
    let need = |w: Option<&FittedWeights>| -> CliResult<FittedWeights> {
        w.cloned()
            .ok_or_else(|| CliError::Data("missing spatial weights".into()))
    };
    let mut summary = match model {
        ModelChoice::Null => fit_null(data, &run.prior, &cfg)?,
        ModelChoice::Spatial => fit_spatial_icar(data, &qp, &run.prior, &cfg)?,
        ModelChoice::SpatialPspline => fit_spatial_pspline(data, &pspline, &run.prior, &cfg)?,
        ModelChoice::Rsr => fit_rsr_with_weights(data, &qp, &need(weights)?, &run.prior, &cfg)?,
        ModelChoice::Tgmrf(v) => fit_tgmrf(data, graph, *v, &run.prior, &cfg)?,
        ModelChoice::SpatPlus(k) => fit_spatial_plus_with_weights(
            data,
            &qp,
            &need(weights)?,
            &SpatialPlusCovariateModel::Eigen(*k),
            &SpatialPlusFinal::Icar,
            &pspline,
            &run.prior,
            &cfg,
        )?,
        ModelChoice::SpatPlusP1 => fit_spatial_plus_with_weights(
            data,
            &qp,
            &need(weights)?,
            &SpatialPlusCovariateModel::Pspline,
            &SpatialPlusFinal::Icar,
            &pspline,
            &run.prior,
            &cfg,
        )?,
        ModelChoice::SpatPlusP2 => fit_spatial_plus_with_weights(
            data,
            &qp,
            &need(weights)?,
            &SpatialPlusCovariateModel::Pspline,
            &SpatialPlusFinal::Pspline,
            &pspline,
            &run.prior,
            &cfg,
        )?,
    };
    summary.model = model.label();
    Ok(summary)
}

fn seed_offset(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h | 1
}

/// Per-model posterior summary CSV shaped like the real-data result tables.
pub fn summary_table_csv(fits: &[PosteriorSummary]) -> String {
    let mut out = String::from("model,parameter,mean,sd,q025,q975,waic,warning\n");
    for fit in fits {
        let warning = if fit.warnings.is_empty() {
            String::new()
        } else {
            fit.warnings.join("; ").replace(',', ";")
        };
        for p in &fit.params {
            // Latent field coordinates stay in the sample archive; the
            // summary table carries the reported parameters.
            if p.name.starts_with("xi[") || p.name.starts_with("theta[") || p.name.starts_with("r[")
            {
                continue;
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                fit.model, p.name, p.mean, p.sd, p.q025, p.q975, fit.waic, warning
            );
        }
    }
    out
}

/// Retained-draw archive for one fit (all chains concatenated, chain column
/// first).
pub fn samples_csv(fit: &PosteriorSummary) -> String {
    let mut out = String::from("chain,draw");
    for name in &fit.param_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (c, chain) in fit.draws.iter().enumerate() {
        for (s, draw) in chain.iter().enumerate() {
            let _ = write!(out, "{c},{s}");
            for v in draw {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

pub struct FitArgs {
    pub models: Vec<ModelChoice>,
    pub write_samples: bool,
}

/// `fit`: run every requested model on a dataset and emit the summary table,
/// sample archives and manifest. Returns the number of nonconverged fits.
pub fn cmd_fit(
    data: &Dataset,
    graph: &AreaGraph,
    args: &FitArgs,
    run: &RunConfig,
) -> CliResult<usize> {
    let needs_weights = args.models.iter().any(|m| {
        matches!(
            m,
            ModelChoice::Rsr
                | ModelChoice::SpatPlus(_)
                | ModelChoice::SpatPlusP1
                | ModelChoice::SpatPlusP2
        )
    });
    let qp = icar_precision(graph);
    let mut weights = None;
    let mut spatial_fit = None;
    if needs_weights || args.models.contains(&ModelChoice::Spatial) {
        let cfg = run
            .mcmc
            .with_seed(run.mcmc.seed.wrapping_add(seed_offset("Spatial")));
        let fit = fit_spatial_icar(data, &qp, &run.prior, &cfg)?;
        weights = Some(FittedWeights::from_spatial_fit(&fit));
        spatial_fit = Some(fit);
    }

    let mut fits = Vec::new();
    for model in &args.models {
        let summary = if matches!(model, ModelChoice::Spatial) {
            spatial_fit.take().ok_or_else(|| {
                CliError::Data("spatial fit unavailable".into())
            })?
        } else {
            fit_model_on_data(model, data, graph, weights.as_ref(), run)?
        };
        fits.push(summary);
    }

    let nonconverged = fits.iter().filter(|f| !f.warnings.is_empty()).count();
    write_out(&run.out_dir, "summary.csv", &summary_table_csv(&fits))?;
    if args.write_samples {
        for fit in &fits {
            write_out(
                &run.out_dir,
                &format!("samples_{}.csv", fit.model),
                &samples_csv(fit),
            )?;
        }
    }
    let model_list = args
        .models
        .iter()
        .map(|m| m.label())
        .collect::<Vec<_>>()
        .join(",");
    write_out(
        &run.out_dir,
        "manifest.txt",
        &manifest(run, "fit", &[("models", model_list)]),
    )?;
    Ok(nonconverged)
}

/// `simulate`: run a study cell and emit the metric table, per-replicate
/// rows, and manifest.
pub fn cmd_simulate(
    spec: &ScenarioSpec,
    map: &StudyMap,
    models: &[ModelChoice],
    run: &RunConfig,
) -> CliResult<usize> {
    let study = run_study(spec, map, models, &run.prior, &run.mcmc, run.workers)
        .map_err(CliError::Model)?;
    write_out(
        &run.out_dir,
        "study_summary.csv",
        &study_summary_csv(&study.summary),
    )?;
    write_out(&run.out_dir, "replicates.csv", &replicate_csv(&study.records))?;

    let mut truth_csv = String::from("area,r_true\n");
    for (i, r) in study.r_true.iter().enumerate() {
        let _ = writeln!(truth_csv, "{},{}", i + 1, r);
    }
    write_out(&run.out_dir, "true_risks.csv", &truth_csv)?;

    let model_list = models
        .iter()
        .map(|m| m.label())
        .collect::<Vec<_>>()
        .join(",");
    write_out(
        &run.out_dir,
        "manifest.txt",
        &manifest(
            run,
            "simulate",
            &[
                ("models", model_list),
                ("scenario", spec.scenario.to_string()),
                ("cor", spec.correlation_target.to_string()),
                ("study", spec.study.to_string()),
                ("replicates", spec.replicates.to_string()),
                (
                    "achieved_correlation",
                    study.achieved_correlation.to_string(),
                ),
            ],
        ),
    )?;
    let warning_count = study.summary.warnings.len();
    if warning_count > 0 {
        eprintln!(
            "warning: {warning_count} replicate-level issues (see study_summary warnings)"
        );
    }
    Ok(warning_count)
}

/// `summarize`: re-aggregate replicate CSVs into a study summary table.
pub fn cmd_summarize(
    in_dir: &Path,
    out_csv: &Path,
    scenario: u8,
    cor: f64,
    study: u8,
    beta_truth: (f64, f64),
) -> CliResult<()> {
    let text = fs::read_to_string(in_dir.join("replicates.csv"))
        .map_err(|e| CliError::Data(format!("{}: {e}", in_dir.join("replicates.csv").display())))?;
    let records = crate::parse_replicate_csv(&text)?;
    if records.is_empty() {
        return Err(CliError::Data("no replicate records".into()));
    }
    // True risks are optional; without them the risk metrics are skipped.
    let r_true: Option<Vec<f64>> = fs::read_to_string(in_dir.join("true_risks.csv"))
        .ok()
        .map(|t| {
            t.lines()
                .skip(1)
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split(',')
                        .nth(1)
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| CliError::Data("bad true_risks.csv".into()))
                })
                .collect::<CliResult<Vec<f64>>>()
        })
        .transpose()?;

    let mut models: Vec<String> = Vec::new();
    for rec in &records {
        if !models.contains(&rec.model) {
            models.push(rec.model.clone());
        }
    }
    models.sort();

    let mut truth = vec![("beta[1]".to_string(), beta_truth.0)];
    if study == 2 {
        truth.push(("beta[2]".to_string(), beta_truth.1));
    }

    let mut out = String::from("scenario,cor,study,model,metric,value\n");
    for model in &models {
        let recs: Vec<&ReplicateRecord> =
            records.iter().filter(|r| &r.model == model).collect();
        let mut values: BTreeMap<String, f64> = BTreeMap::new();
        for (name, t) in &truth {
            let tag = name.replace(['[', ']'], "");
            let mut means = Vec::new();
            let mut sds = Vec::new();
            let mut intervals = Vec::new();
            for rec in &recs {
                let (m, sd, lo, hi) = rec.param(name).map_err(CliError::Model)?;
                means.push(m);
                sds.push(sd);
                intervals.push((lo, hi));
            }
            let (se_sim, se_est) =
                spconf::metrics::se_sim_and_est(&means, &sds).map_err(CliError::Model)?;
            let (cov, len) = spconf::metrics::coverage_and_length(&intervals, *t)
                .map_err(CliError::Model)?;
            values.insert(
                format!("{tag}_mean"),
                means.iter().sum::<f64>() / means.len() as f64,
            );
            values.insert(format!("{tag}_se_sim"), se_sim);
            values.insert(format!("{tag}_se_est"), se_est);
            values.insert(format!("{tag}_coverage95"), cov);
            values.insert(format!("{tag}_ci_length"), len);
            if *t == 0.0 {
                values.insert(
                    format!("{tag}_type_s_rate"),
                    spconf::metrics::type_s_rate(&intervals, 0.0).map_err(CliError::Model)?,
                );
            } else {
                let (marb, mrrmse) = spconf::metrics::marb_mrrmse(
                    &means,
                    *t,
                    spconf::metrics::MarbVariant::AbsOfMean,
                )
                .map_err(CliError::Model)?;
                values.insert(format!("{tag}_marb"), marb);
                values.insert(format!("{tag}_mrrmse"), mrrmse);
            }
        }
        if let Some(rt) = &r_true {
            if recs.iter().all(|r| r.risk_mean.len() == rt.len()) && !rt.is_empty() {
                if let Ok((marb, mrrmse)) = spconf::metrics::risk_marb_mrrmse(
                    &recs,
                    rt,
                    spconf::metrics::MarbVariant::AbsOfMean,
                ) {
                    values.insert("risk_marb".into(), marb);
                    values.insert("risk_mrrmse".into(), mrrmse);
                }
            }
        }
        let waics: Vec<f64> = recs.iter().map(|r| r.waic).collect();
        values.insert(
            "waic_mean".into(),
            waics.iter().sum::<f64>() / waics.len() as f64,
        );
        for (metric, value) in &values {
            let _ = writeln!(out, "{scenario},{cor},{study},{model},{metric},{value}");
        }
    }
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_csv, out)?;
    Ok(())
}
