//! Poisson log-linear model fitting: datasets, priors, the MCMC engine, and
//! the null / spatial / RSR / spatial+ estimator families.

pub mod diagnostics;
pub mod engine;
mod models;

pub use models::{
    fit_null, fit_rsr, fit_rsr_with_weights, fit_spatial_icar, fit_spatial_plus,
    fit_spatial_plus_with_weights, fit_spatial_pspline, spatial_plus_residualize, CovariateModel,
    PsplineSpec, RsrProjection,
};

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::standardize;

/// Observed counts, expected counts, standardized covariates, and centroids
/// for `n` small areas.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Vec<u64>,
    pub e: Vec<f64>,
    /// Covariates standardized to zero mean and unit sample variance.
    pub x: DMatrix<f64>,
    /// Covariates as supplied, before standardization.
    pub x_raw: DMatrix<f64>,
    /// Per-column (mean, sd) used for standardization.
    pub x_scaling: Vec<(f64, f64)>,
    pub centroids: Vec<(f64, f64)>,
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: Vec<u64>,
        e: Vec<f64>,
        x_raw: DMatrix<f64>,
        centroids: Vec<(f64, f64)>,
        labels: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::validation("dataset has no areas"));
        }
        if e.len() != n || x_raw.nrows() != n || centroids.len() != n || labels.len() != n {
            return Err(Error::validation(format!(
                "length mismatch: y={n}, e={}, x rows={}, centroids={}, labels={}",
                e.len(),
                x_raw.nrows(),
                centroids.len(),
                labels.len()
            )));
        }
        for (i, &ei) in e.iter().enumerate() {
            if !(ei > 0.0) {
                return Err(Error::validation(format!(
                    "expected count must be positive, got {ei} at area {}",
                    i + 1
                )));
            }
        }
        let mut x = x_raw.clone();
        let mut x_scaling = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let mut col: Vec<f64> = x.column(j).iter().copied().collect();
            let (m, sd) = standardize(&mut col).map_err(|e| {
                Error::validation(format!("covariate column {}: {e}", j + 1))
            })?;
            for (i, v) in col.iter().enumerate() {
                x[(i, j)] = *v;
            }
            x_scaling.push((m, sd));
        }
        Ok(Dataset {
            y,
            e,
            x,
            x_raw,
            x_scaling,
            centroids,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn total_counts(&self) -> u64 {
        self.y.iter().sum()
    }
}

/// Prior hyperparameters shared by all model families.
#[derive(Debug, Clone, Copy)]
pub struct PriorSpec {
    /// Precision of the zero-mean normal prior on each regression coefficient.
    pub beta_precision: f64,
    /// Upper bound of the uniform prior on standard-deviation parameters.
    pub sigma_upper: f64,
    /// Precision of the normal prior on the intercept.
    pub alpha_precision: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            beta_precision: 0.001,
            sigma_upper: 10.0,
            alpha_precision: 0.001,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta_precision > 0.0 && self.sigma_upper > 0.0 && self.alpha_precision > 0.0 {
            Ok(())
        } else {
            Err(Error::validation("prior hyperparameters must be positive"))
        }
    }
}

/// Chain layout for the sampler. Defaults follow the three-chain, 10000
/// iteration, 2000 burn-in, thin-20 schedule (1200 retained draws).
#[derive(Debug, Clone, Copy)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adaptation_window: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 3,
            iterations: 10_000,
            burn_in: 2_000,
            thin: 20,
            seed: 1,
            adaptation_window: 50,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::validation("need at least one chain"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::validation("burn-in must be shorter than the run"));
        }
        if self.thin == 0 {
            return Err(Error::validation("thinning interval must be at least 1"));
        }
        if (self.iterations - self.burn_in) % self.thin != 0 {
            return Err(Error::validation(
                "iterations - burn_in must be a multiple of thin",
            ));
        }
        Ok(())
    }

    pub fn retained_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Which estimator family to fit, with its structural choices.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Null,
    SpatialIcar,
    /// Tensor-product P-spline spatial surface.
    SpatialPspline(PsplineSpec),
    Rsr,
    SpatialPlus {
        covariate_model: SpatialPlusCovariateModel,
        final_model: SpatialPlusFinal,
        pspline: PsplineSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPlusCovariateModel {
    /// Regress each covariate on the `k` lowest non-null eigenvectors.
    Eigen(usize),
    /// Penalized tensor-product P-spline covariate model.
    Pspline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPlusFinal {
    Icar,
    Pspline,
}

/// Posterior summary for one parameter.
#[derive(Debug, Clone)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Full posterior summary of a fitted model.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub model: String,
    pub params: Vec<ParamSummary>,
    pub param_names: Vec<String>,
    /// Retained draws per chain, on the reporting scale (chain, draw, param).
    pub draws: Vec<Vec<Vec<f64>>>,
    /// Pointwise log-likelihood, rows = retained draws (all chains), cols = areas.
    pub loglik: Vec<Vec<f64>>,
    pub waic: f64,
    /// Posterior mean of mu_i = e_i r_i per area.
    pub fitted_mu: Vec<f64>,
    /// Posterior mean relative risk per area.
    pub fitted_risk: Vec<f64>,
    pub warnings: Vec<String>,
    /// Model-specific scalar diagnostics (e.g. projection residuals).
    pub diagnostics: BTreeMap<String, f64>,
}

impl PosteriorSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// All retained draws of one parameter, chains concatenated in order.
    pub fn draws_of(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.param_names.iter().position(|n| n == name)?;
        let mut out = Vec::new();
        for chain in &self.draws {
            for draw in chain {
                out.push(draw[idx]);
            }
        }
        Some(out)
    }

    pub fn converged(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Diagonal weights from a completed spatial fit (posterior mean of mu).
#[derive(Debug, Clone)]
pub struct FittedWeights(pub Vec<f64>);

impl FittedWeights {
    pub fn from_spatial_fit(summary: &PosteriorSummary) -> Self {
        FittedWeights(summary.fitted_mu.clone())
    }
}
