//! Evaluation statistics over simulation replicates: bias, standard errors,
//! coverage, Type-S rates, interval lengths, and WAIC aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::mean;

/// Posterior summary of one fitted replicate, reduced to what the metric
/// suite consumes.
#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub model: String,
    /// Per-parameter (mean, sd, q2.5, q97.5).
    pub params: BTreeMap<String, (f64, f64, f64, f64)>,
    /// Posterior mean relative risk per area.
    pub risk_mean: Vec<f64>,
    pub waic: f64,
    pub converged: bool,
}

impl ReplicateRecord {
    pub fn param(&self, name: &str) -> Result<(f64, f64, f64, f64)> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::validation(format!("record has no parameter {name}")))
    }
}

/// How the mean absolute relative bias aggregates over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarbVariant {
    /// `|mean_k((est_k - truth)/truth)|` — absolute value of the average
    /// relative bias (default).
    #[default]
    AbsOfMean,
    /// `mean_k(|(est_k - truth)/truth|)` — average absolute relative bias.
    MeanOfAbs,
}

/// Simulated and estimated standard errors of a posterior-mean estimator:
/// `se_sim` is the population (1/K) standard deviation of the posterior
/// means, `se_est` the average posterior standard deviation.
pub fn se_sim_and_est(means: &[f64], sds: &[f64]) -> Result<(f64, f64)> {
    if means.len() < 2 || means.len() != sds.len() {
        return Err(Error::validation(
            "standard-error summary needs at least 2 paired records",
        ));
    }
    let k = means.len() as f64;
    let m = mean(means);
    let se_sim = (means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k).sqrt();
    let se_est = mean(sds);
    Ok((se_sim, se_est))
}

/// Empirical coverage (percent of intervals containing the truth) and mean
/// interval length.
pub fn coverage_and_length(intervals: &[(f64, f64)], truth: f64) -> Result<(f64, f64)> {
    if intervals.is_empty() {
        return Err(Error::validation("no intervals"));
    }
    if !truth.is_finite() {
        return Err(Error::validation("truth must be finite"));
    }
    let k = intervals.len() as f64;
    let covered = intervals
        .iter()
        .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
        .count() as f64;
    let length = intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / k;
    Ok((100.0 * covered / k, length))
}

/// Percent of replicates whose 95% interval excludes zero, valid only when
/// the true parameter is zero.
pub fn type_s_rate(intervals: &[(f64, f64)], truth: f64) -> Result<f64> {
    if truth != 0.0 {
        return Err(Error::validation(
            "Type-S rate is defined only for a truly zero parameter",
        ));
    }
    if intervals.is_empty() {
        return Err(Error::validation("no intervals"));
    }
    let k = intervals.len() as f64;
    let excluded = intervals
        .iter()
        .filter(|(lo, hi)| *lo > 0.0 || *hi < 0.0)
        .count() as f64;
    Ok(100.0 * excluded / k)
}

/// Mean absolute relative bias and relative root mean squared error of the
/// estimates against a nonzero truth.
pub fn marb_mrrmse(estimates: &[f64], truth: f64, variant: MarbVariant) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::validation("no estimates"));
    }
    if truth == 0.0 {
        return Err(Error::validation(
            "relative bias is undefined for zero truth",
        ));
    }
    let rel: Vec<f64> = estimates.iter().map(|e| (e - truth) / truth).collect();
    let marb = match variant {
        MarbVariant::AbsOfMean => mean(&rel).abs(),
        MarbVariant::MeanOfAbs => mean(&rel.iter().map(|v| v.abs()).collect::<Vec<_>>()),
    };
    let mrrmse = mean(&rel.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt();
    Ok((marb, mrrmse))
}

/// Risk-surface MARB/MRRMSE: the per-area relative errors of the posterior
/// mean risks against the true risks, aggregated per area over replicates
/// and then averaged over areas.
pub fn risk_marb_mrrmse(
    records: &[&ReplicateRecord],
    r_true: &[f64],
    variant: MarbVariant,
) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::validation("no records"));
    }
    let n = r_true.len();
    for rec in records {
        if rec.risk_mean.len() != n {
            return Err(Error::validation("risk vector length mismatch"));
        }
    }
    if r_true.iter().any(|&r| r == 0.0) {
        return Err(Error::validation("true risks must be nonzero"));
    }
    let mut marb_sum = 0.0;
    let mut mrrmse_sum = 0.0;
    for a in 0..n {
        let est: Vec<f64> = records.iter().map(|rec| rec.risk_mean[a]).collect();
        let (marb, mrrmse) = marb_mrrmse(&est, r_true[a], variant)?;
        marb_sum += marb;
        mrrmse_sum += mrrmse;
    }
    Ok((marb_sum / n as f64, mrrmse_sum / n as f64))
}

/// One (model, metric) table for a study run.
#[derive(Debug, Clone)]
pub struct ModelMetrics {
    pub model: String,
    pub n_replicates: usize,
    pub n_failed: usize,
    /// Long-format metric map: metric name -> value.
    pub values: BTreeMap<String, f64>,
}

/// Metric table over all models of one (scenario, subscenario, study) run.
#[derive(Debug, Clone)]
pub struct StudySummary {
    pub scenario: u8,
    pub correlation_target: f64,
    pub achieved_correlation: f64,
    pub study: u8,
    pub models: Vec<ModelMetrics>,
    pub warnings: Vec<String>,
}

impl StudySummary {
    pub fn model(&self, name: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.model == name)
    }

    pub fn value(&self, model: &str, metric: &str) -> Option<f64> {
        self.model(model).and_then(|m| m.values.get(metric)).copied()
    }

    /// Long-format rows: (scenario, cor, study, model, metric, value).
    pub fn rows(&self) -> Vec<(u8, f64, u8, String, String, f64)> {
        let mut out = Vec::new();
        for m in &self.models {
            for (metric, value) in &m.values {
                out.push((
                    self.scenario,
                    self.correlation_target,
                    self.study,
                    m.model.clone(),
                    metric.clone(),
                    *value,
                ));
            }
        }
        out
    }
}

/// Aggregate the replicate records of one model into its metric row.
///
/// `beta_truth` pairs parameter names with their generating values; a zero
/// truth yields a Type-S rate for that parameter, a nonzero truth yields
/// MARB/MRRMSE.
pub fn summarize_model(
    model: &str,
    records: &[&ReplicateRecord],
    beta_truth: &[(String, f64)],
    r_true: &[f64],
    n_failed: usize,
    variant: MarbVariant,
) -> Result<ModelMetrics> {
    if records.len() < 2 {
        return Err(Error::validation(format!(
            "model {model}: need at least 2 successful replicates"
        )));
    }
    let mut values = BTreeMap::new();
    for (name, truth) in beta_truth {
        let tag = name.replace(['[', ']'], "");
        let mut means = Vec::with_capacity(records.len());
        let mut sds = Vec::with_capacity(records.len());
        let mut intervals = Vec::with_capacity(records.len());
        for rec in records {
            let (m, sd, lo, hi) = rec.param(name)?;
            means.push(m);
            sds.push(sd);
            intervals.push((lo, hi));
        }
        let (se_sim, se_est) = se_sim_and_est(&means, &sds)?;
        let (coverage, length) = coverage_and_length(&intervals, *truth)?;
        values.insert(format!("{tag}_mean"), mean(&means));
        values.insert(format!("{tag}_se_sim"), se_sim);
        values.insert(format!("{tag}_se_est"), se_est);
        values.insert(format!("{tag}_coverage95"), coverage);
        values.insert(format!("{tag}_ci_length"), length);
        if *truth == 0.0 {
            values.insert(format!("{tag}_type_s_rate"), type_s_rate(&intervals, 0.0)?);
        } else {
            let (marb, mrrmse) = marb_mrrmse(&means, *truth, variant)?;
            values.insert(format!("{tag}_marb"), marb);
            values.insert(format!("{tag}_mrrmse"), mrrmse);
        }
    }
    let (risk_marb, risk_mrrmse) = risk_marb_mrrmse(records, r_true, variant)?;
    values.insert("risk_marb".into(), risk_marb);
    values.insert("risk_mrrmse".into(), risk_mrrmse);
    let waics: Vec<f64> = records.iter().map(|r| r.waic).collect();
    values.insert("waic_mean".into(), mean(&waics));
    Ok(ModelMetrics {
        model: model.to_string(),
        n_replicates: records.len(),
        n_failed,
        values,
    })
}
