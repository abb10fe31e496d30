//! The estimator families: null, ICAR / P-spline spatial, restricted spatial
//! regression, and the two-stage spatial+ fit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::areal::{eigen_lowest_nonnull, IcarPrecision, SpectralBasis};
use crate::error::{Error, Result};
use crate::inference::diagnostics::{effective_sample_size, split_rhat, summarize_draws, waic};
use crate::inference::engine::{chunked_blocks, run_chains, BlockSpec, McmcRun};
use crate::inference::{
    Dataset, FittedWeights, McmcConfig, ParamSummary, PosteriorSummary, PriorSpec,
};
use crate::linalg::{mix_seed, standardize, sym_eigen_sorted};
use crate::splines::{tensor_basis_at, tensor_penalty, TensorPenalty};

/// Marginal dimensions, degree and covariate-model smoothing weights for the
/// P-spline pathways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsplineSpec {
    pub n_internal_knots: usize,
    pub degree: usize,
    /// Penalty weights for the (penalized least-squares) covariate model.
    pub cov_lambda1: f64,
    pub cov_lambda2: f64,
}

impl Default for PsplineSpec {
    fn default() -> Self {
        PsplineSpec {
            n_internal_knots: 11,
            degree: 3,
            cov_lambda1: 1.0,
            cov_lambda2: 1.0,
        }
    }
}

/// Spatial structure used to de-trend a covariate in the spatial+ first stage.
pub enum CovariateModel<'a> {
    /// Weighted regression on the columns of a low-frequency eigenbasis.
    Eigen(&'a SpectralBasis),
    /// Penalized weighted regression on a tensor-product B-spline basis.
    Pspline {
        basis: &'a DMatrix<f64>,
        penalty: &'a TensorPenalty,
    },
}

// Field blocks update roughly this many coordinates jointly.
const FIELD_BLOCK: usize = 10;
// Convergence gates for reported (non-field) parameters.
const RHAT_GATE: f64 = 1.05;
const ESS_GATE: f64 = 400.0;

/// Precomputed Poisson likelihood pieces for one dataset.
struct PoissonContext {
    y: Vec<f64>,
    e: Vec<f64>,
    log_e: Vec<f64>,
    lgamma_y1: Vec<f64>,
}

impl PoissonContext {
    fn new(d: &Dataset) -> Self {
        PoissonContext {
            y: d.y.iter().map(|&v| v as f64).collect(),
            e: d.e.clone(),
            log_e: d.e.iter().map(|v| v.ln()).collect(),
            lgamma_y1: d.y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).collect(),
        }
    }

    /// Poisson log-likelihood kernel (constants dropped) for log-risk `eta`.
    fn kernel(&self, eta: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..eta.len() {
            let log_mu = self.log_e[i] + eta[i];
            s += self.y[i] * log_mu - self.e[i] * eta[i].exp();
        }
        s
    }

    /// Full pointwise log-likelihood for the WAIC matrix.
    fn pointwise(&self, eta: &[f64]) -> Vec<f64> {
        (0..eta.len())
            .map(|i| {
                let log_mu = self.log_e[i] + eta[i];
                self.y[i] * log_mu - self.e[i] * eta[i].exp() - self.lgamma_y1[i]
            })
            .collect()
    }
}

fn log_prior_normal(x: f64, precision: f64) -> f64 {
    -0.5 * precision * x * x
}

/// Log prior of a standard-deviation parameter sampled as `s = ln(sigma)`,
/// uniform on `(0, upper)`, Jacobian included. Returns `-inf` out of range.
/// A hard floor keeps the chain out of the degenerate corner where the
/// scale underflows.
fn log_prior_sd_on_log_scale(s: f64, upper: f64) -> f64 {
    if s >= upper.ln() || s < -14.0 {
        f64::NEG_INFINITY
    } else {
        s
    }
}

fn initial_alpha(ctx: &PoissonContext) -> f64 {
    let total_y: f64 = ctx.y.iter().sum();
    let total_e: f64 = ctx.e.iter().sum();
    (total_y.max(0.5) / total_e).ln()
}

/// Data-informed starting field: smoothed log standardized ratios, centred
/// within every graph component. Starting the field at exactly zero lets
/// the scale parameter collapse before the field can grow (the improper
/// prior rewards shrinking sigma without bound while the quadratic form is
/// zero), deadlocking the chain.
fn initial_field(ctx: &PoissonContext, alpha0: f64, components: &[Vec<usize>]) -> Vec<f64> {
    let n = ctx.y.len();
    let mut field: Vec<f64> = (0..n)
        .map(|i| ((ctx.y[i] + 0.5) / ctx.e[i]).ln() - alpha0)
        .collect();
    for comp in components {
        let m: f64 = comp.iter().map(|&i| field[i]).sum::<f64>() / comp.len() as f64;
        for &i in comp {
            field[i] -= m;
        }
    }
    field
}

fn initial_log_sd(field: &[f64], upper: f64) -> f64 {
    let n = field.len() as f64;
    let sd = (field.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    sd.clamp(0.05, 0.5 * upper).ln()
}

/// Turn a finished run into a `PosteriorSummary`.
///
/// `to_report` maps sampler coordinates to the reporting scale and
/// `eta_of` produces the linear predictor (log relative risk) per area.
fn assemble_summary(
    model: &str,
    ctx: &PoissonContext,
    run: &McmcRun,
    names: Vec<String>,
    gated: &[bool],
    to_report: impl Fn(&[f64]) -> Vec<f64>,
    eta_of: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<PosteriorSummary> {
    let n_areas = ctx.y.len();
    let n_params = names.len();

    let report: Vec<Vec<Vec<f64>>> = run
        .chains
        .iter()
        .map(|chain| chain.iter().map(|d| to_report(d)).collect())
        .collect();

    let mut params = Vec::with_capacity(n_params);
    let mut warnings = Vec::new();
    for (p, name) in names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = report
            .iter()
            .map(|chain| chain.iter().map(|d| d[p]).collect())
            .collect();
        let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let (mean, sd, q025, q975) = summarize_draws(&pooled);
        let rhat = split_rhat(&per_chain);
        let ess = effective_sample_size(&per_chain);
        if gated[p] {
            if rhat.is_nan() || rhat > RHAT_GATE {
                warnings.push(format!("{name}: rhat {rhat:.3} exceeds {RHAT_GATE}"));
            }
            if !ess.is_nan() && ess < ESS_GATE {
                warnings.push(format!("{name}: effective sample size {ess:.0} below {ESS_GATE}"));
            }
        }
        params.push(ParamSummary {
            name: name.clone(),
            mean,
            sd,
            q025,
            q975,
            rhat,
            ess,
        });
    }

    let mut loglik = Vec::with_capacity(run.total_retained());
    let mut risk_sum = vec![0.0f64; n_areas];
    for chain in &run.chains {
        for draw in chain {
            let eta = eta_of(draw);
            loglik.push(ctx.pointwise(&eta));
            for i in 0..n_areas {
                risk_sum[i] += eta[i].exp();
            }
        }
    }
    let total = run.total_retained() as f64;
    let fitted_risk: Vec<f64> = risk_sum.iter().map(|s| s / total).collect();
    let fitted_mu: Vec<f64> = fitted_risk
        .iter()
        .zip(&ctx.e)
        .map(|(r, e)| r * e)
        .collect();
    let waic = waic(&loglik)?;

    Ok(PosteriorSummary {
        model: model.to_string(),
        params,
        param_names: names,
        draws: report,
        loglik,
        waic,
        fitted_mu,
        fitted_risk,
        warnings,
        diagnostics: BTreeMap::new(),
    })
}

fn beta_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("beta[{j}]")).collect()
}

/// Poisson regression with intercept and covariates only (no spatial term).
pub fn fit_null(d: &Dataset, prior: &PriorSpec, cfg: &McmcConfig) -> Result<PosteriorSummary> {
    prior.validate()?;
    cfg.validate()?;
    let ctx = PoissonContext::new(d);
    let (n, p) = (d.n(), d.p());
    let x = d.x.clone();

    let eta_of = move |coords: &[f64]| -> Vec<f64> {
        let alpha = coords[0];
        (0..n)
            .map(|i| {
                let mut eta = alpha;
                for j in 0..p {
                    eta += x[(i, j)] * coords[1 + j];
                }
                eta
            })
            .collect()
    };

    let prior_spec = *prior;
    let ctx_ref = &ctx;
    let eta_ref = &eta_of;
    let target = move |coords: &[f64]| -> f64 {
        let mut lp = log_prior_normal(coords[0], prior_spec.alpha_precision);
        for j in 0..p {
            lp += log_prior_normal(coords[1 + j], prior_spec.beta_precision);
        }
        lp + ctx_ref.kernel(&eta_ref(coords))
    };

    let mut init = vec![0.0; 1 + p];
    init[0] = initial_alpha(&ctx);
    let mut blocks = vec![BlockSpec::plain("alpha", vec![0], 0.1)];
    if p > 0 {
        blocks.push(BlockSpec::plain("beta", (1..=p).collect(), 0.05));
    }

    let run = run_chains(&target, &init, &blocks, cfg)?;
    let mut names = vec!["alpha".to_string()];
    names.extend(beta_names(p));
    let gated = vec![true; names.len()];
    let mut summary = assemble_summary(
        "Null",
        &ctx,
        &run,
        names,
        &gated,
        |c| c.to_vec(),
        eta_of,
    )?;
    if d.total_counts() == 0 {
        summary.warnings.push("all observed counts are zero".into());
    }
    Ok(summary)
}

/// Spatial model with ICAR random effects: `log r = alpha + X beta + xi`,
/// `xi` recentered to zero mean within every graph component at each update.
pub fn fit_spatial_icar(
    d: &Dataset,
    qp: &IcarPrecision,
    prior: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSummary> {
    prior.validate()?;
    cfg.validate()?;
    if qp.n() != d.n() {
        return Err(Error::validation(format!(
            "precision matrix is {}x{} but dataset has {} areas",
            qp.n(),
            qp.n(),
            d.n()
        )));
    }
    let ctx = PoissonContext::new(d);
    let (n, p) = (d.n(), d.p());
    let x = d.x.clone();
    let field0 = 1 + p;
    let s_idx = field0 + n;
    let rank = qp.rank() as f64;

    let eta_of = move |coords: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut eta = coords[0] + coords[field0 + i];
                for j in 0..p {
                    eta += x[(i, j)] * coords[1 + j];
                }
                eta
            })
            .collect()
    };

    let prior_spec = *prior;
    let qp_cl = qp.clone();
    let ctx_ref = &ctx;
    let eta_ref = &eta_of;
    let target = move |coords: &[f64]| -> f64 {
        let s = coords[s_idx];
        let mut lp = log_prior_sd_on_log_scale(s, prior_spec.sigma_upper);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp += log_prior_normal(coords[0], prior_spec.alpha_precision);
        for j in 0..p {
            lp += log_prior_normal(coords[1 + j], prior_spec.beta_precision);
        }
        let sigma2 = (2.0 * s).exp();
        let quad = qp_cl.quad_form(&coords[field0..field0 + n]);
        lp += -rank * s - 0.5 * quad / sigma2;
        lp + ctx_ref.kernel(&eta_ref(coords))
    };

    let mut init = vec![0.0; s_idx + 1];
    init[0] = initial_alpha(&ctx);
    let field_init = initial_field(&ctx, init[0], qp.components());
    init[field0..field0 + n].copy_from_slice(&field_init);
    init[s_idx] = initial_log_sd(&field_init, prior.sigma_upper);

    let groups: Vec<Vec<usize>> = qp
        .components()
        .iter()
        .map(|comp| comp.iter().map(|&i| field0 + i).collect())
        .collect();
    let mut blocks = vec![BlockSpec::plain("alpha", vec![0], 0.1)];
    if p > 0 {
        blocks.push(BlockSpec::plain("beta", (1..=p).collect(), 0.05));
    }
    blocks.extend(chunked_blocks(
        "xi",
        field0..field0 + n,
        FIELD_BLOCK,
        0.1,
        &groups,
    ));
    blocks.push(BlockSpec::plain("log_sigma_xi", vec![s_idx], 0.3));

    let run = run_chains(&target, &init, &blocks, cfg)?;

    let mut names = vec!["alpha".to_string()];
    names.extend(beta_names(p));
    let mut gated = vec![true; names.len()];
    for i in 0..n {
        names.push(format!("xi[{}]", i + 1));
        gated.push(false);
    }
    names.push("sigma_xi".to_string());
    gated.push(true);

    assemble_summary(
        "Spatial",
        &ctx,
        &run,
        names,
        &gated,
        move |c| {
            let mut out = c.to_vec();
            out[s_idx] = c[s_idx].exp();
            out
        },
        eta_of,
    )
}

/// Number of basis coordinates and marginal eigen-structure for the
/// eigen-reparameterized P-spline surface.
struct PsplineBasis {
    /// Transformed design: original tensor basis times the penalty eigenbasis.
    design: DMatrix<f64>,
    /// Per-coordinate marginal eigenvalue pair (s_i, t_j).
    pairs: Vec<(f64, f64)>,
    /// Coordinates whose penalty eigenvalue is structurally zero (3 of them;
    /// the constant direction is dropped outright).
    vague: Vec<bool>,
}

fn pspline_surface_basis(d: &Dataset, spec: &PsplineSpec) -> Result<PsplineBasis> {
    let mut s1: Vec<f64> = d.centroids.iter().map(|c| c.0).collect();
    let mut s2: Vec<f64> = d.centroids.iter().map(|c| c.1).collect();
    standardize(&mut s1).map_err(|_| Error::validation("constant longitude coordinates"))?;
    standardize(&mut s2).map_err(|_| Error::validation("constant latitude coordinates"))?;
    let tb = tensor_basis_at(&s1, &s2, spec.n_internal_knots, spec.degree)?;
    let pen = tensor_penalty(tb.k1, tb.k2, 1.0, 1.0)?;
    let (s_fac, t_fac) = pen.marginal_factors();
    let (sv, su) = null_aligned_eigen(&s_fac);
    let (tv, tu) = null_aligned_eigen(&t_fac);
    let (k1, k2) = (tb.k1, tb.k2);

    // Transformed design column for pair (i, j) is B * (u_i ⊗ v_j).
    let mut design = DMatrix::zeros(d.n(), k1 * k2 - 1);
    let mut pairs = Vec::with_capacity(k1 * k2 - 1);
    let mut vague = Vec::with_capacity(k1 * k2 - 1);
    let mut col = 0;
    for i in 0..k1 {
        for j in 0..k2 {
            let si = sv[i];
            let tj = tv[j];
            let is_null = si == 0.0 && tj == 0.0;
            if is_null && i == 0 && j == 0 {
                continue; // constant surface, absorbed by the intercept
            }
            let mut v = DVector::zeros(k1 * k2);
            for a in 0..k1 {
                for b in 0..k2 {
                    v[a * k2 + b] = su[(a, i)] * tu[(b, j)];
                }
            }
            let bv = &tb.b * v;
            design.set_column(col, &bv);
            pairs.push((si, tj));
            vague.push(is_null);
            col += 1;
        }
    }
    Ok(PsplineBasis {
        design,
        pairs,
        vague,
    })
}

/// Eigendecomposition of a second-difference factor with its two-dimensional
/// null space rotated so the first null vector is the constant direction.
/// Zero eigenvalues are clamped to exactly zero.
fn null_aligned_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let k = m.nrows();
    let (mut vals, mut vecs) = sym_eigen_sorted(m);
    let lambda_max = vals.last().copied().unwrap_or(0.0).max(0.0);
    let thresh = 1e-9 * lambda_max.max(1.0);
    let null_dim = vals.iter().filter(|&&v| v < thresh).count();
    for v in vals.iter_mut().take(null_dim) {
        *v = 0.0;
    }
    if null_dim == 2 {
        // Span{1, ramp}: replace by {1/sqrt(k), orthonormalized ramp}.
        let ones = DVector::from_element(k, 1.0 / (k as f64).sqrt());
        let mut ramp = DVector::from_fn(k, |i, _| i as f64 - (k as f64 - 1.0) / 2.0);
        ramp -= &ones * ones.dot(&ramp);
        ramp /= ramp.norm();
        vecs.set_column(0, &ones);
        vecs.set_column(1, &ramp);
    }
    (vals, vecs)
}

/// Spatial model with a tensor-product P-spline surface over the
/// standardized centroid coordinates, with one smoothing standard deviation
/// per coordinate direction.
pub fn fit_spatial_pspline(
    d: &Dataset,
    spec: &PsplineSpec,
    prior: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSummary> {
    prior.validate()?;
    cfg.validate()?;
    let ctx = PoissonContext::new(d);
    let (n, p) = (d.n(), d.p());
    let x = d.x.clone();
    let basis = pspline_surface_basis(d, spec)?;
    let m = basis.pairs.len();
    let theta0 = 1 + p;
    let s1_idx = theta0 + m;
    let s2_idx = s1_idx + 1;

    let design = basis.design.clone();
    let eta_of = move |coords: &[f64]| -> Vec<f64> {
        let mut eta: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = coords[0];
                for j in 0..p {
                    v += x[(i, j)] * coords[1 + j];
                }
                v
            })
            .collect();
        for c in 0..m {
            let th = coords[theta0 + c];
            if th != 0.0 {
                for i in 0..n {
                    eta[i] += design[(i, c)] * th;
                }
            }
        }
        eta
    };

    let prior_spec = *prior;
    let pairs = basis.pairs.clone();
    let vague = basis.vague.clone();
    let ctx_ref = &ctx;
    let eta_ref = &eta_of;
    let target = move |coords: &[f64]| -> f64 {
        let (s1, s2) = (coords[s1_idx], coords[s2_idx]);
        let mut lp = log_prior_sd_on_log_scale(s1, prior_spec.sigma_upper)
            + log_prior_sd_on_log_scale(s2, prior_spec.sigma_upper);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp += log_prior_normal(coords[0], prior_spec.alpha_precision);
        for j in 0..p {
            lp += log_prior_normal(coords[1 + j], prior_spec.beta_precision);
        }
        let w1 = (-2.0 * s1).exp();
        let w2 = (-2.0 * s2).exp();
        for c in 0..m {
            let th = coords[theta0 + c];
            if vague[c] {
                lp += log_prior_normal(th, prior_spec.beta_precision);
            } else {
                let lam = w1 * pairs[c].0 + w2 * pairs[c].1;
                lp += 0.5 * lam.ln() - 0.5 * lam * th * th;
            }
        }
        lp + ctx_ref.kernel(&eta_ref(coords))
    };

    let mut init = vec![0.0; s2_idx + 1];
    init[0] = initial_alpha(&ctx);
    // Ridge-start the surface coefficients on the raw log ratios; an exact
    // zero start deadlocks the smoothing scales the same way an ICAR field
    // at zero does.
    let r0: Vec<f64> = (0..n)
        .map(|i| ((ctx.y[i] + 0.5) / ctx.e[i]).ln() - init[0])
        .collect();
    let mut gram = basis.design.transpose() * &basis.design;
    for c in 0..m {
        gram[(c, c)] += 1.0;
    }
    let rhs = basis.design.transpose() * DVector::from_column_slice(&r0);
    if let Some(ch) = gram.cholesky() {
        let start = ch.solve(&rhs);
        for c in 0..m {
            init[theta0 + c] = start[c];
        }
    }
    let theta_init: Vec<f64> = (0..m).map(|c| init[theta0 + c]).collect();
    init[s1_idx] = initial_log_sd(&theta_init, prior.sigma_upper);
    init[s2_idx] = init[s1_idx];

    let mut blocks = vec![BlockSpec::plain("alpha", vec![0], 0.1)];
    if p > 0 {
        blocks.push(BlockSpec::plain("beta", (1..=p).collect(), 0.05));
    }
    blocks.extend(chunked_blocks(
        "theta",
        theta0..theta0 + m,
        FIELD_BLOCK,
        0.1,
        &[],
    ));
    blocks.push(BlockSpec::plain("log_sigma_s1", vec![s1_idx], 0.3));
    blocks.push(BlockSpec::plain("log_sigma_s2", vec![s2_idx], 0.3));

    let run = run_chains(&target, &init, &blocks, cfg)?;

    let mut names = vec!["alpha".to_string()];
    names.extend(beta_names(p));
    let mut gated = vec![true; names.len()];
    for c in 0..m {
        names.push(format!("theta[{}]", c + 1));
        gated.push(false);
    }
    names.push("sigma_s1".to_string());
    names.push("sigma_s2".to_string());
    gated.push(true);
    gated.push(true);

    assemble_summary(
        "SpatialP",
        &ctx,
        &run,
        names,
        &gated,
        move |c| {
            let mut out = c.to_vec();
            out[s1_idx] = c[s1_idx].exp();
            out[s2_idx] = c[s2_idx].exp();
            out
        },
        eta_of,
    )
}

/// The restriction operator of the RSR model for a given weight diagonal.
#[derive(Debug, Clone)]
pub struct RsrProjection {
    /// Orthonormal columns spanning the non-null eigenspace of the projector.
    pub l: DMatrix<f64>,
    /// `W^{-1/2} L L' W^{1/2}`, applied to the raw field.
    pub restriction: DMatrix<f64>,
    /// `X_*' W` (used by the per-draw orthogonality audit).
    pub xtw: DMatrix<f64>,
    /// Largest deviation of the projector from symmetry/idempotence.
    pub projector_defect: f64,
}

impl RsrProjection {
    /// Build from standardized covariates and positive weights.
    pub fn new(x: &DMatrix<f64>, weights: &[f64]) -> Result<Self> {
        let n = x.nrows();
        if weights.len() != n {
            return Err(Error::validation("weight length does not match areas"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::validation("weights must be positive"));
        }
        let p1 = x.ncols() + 1;
        let mut xstar = DMatrix::zeros(n, p1);
        for i in 0..n {
            xstar[(i, 0)] = 1.0;
            for j in 0..x.ncols() {
                xstar[(i, j + 1)] = x[(i, j)];
            }
        }
        let wsqrt: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        // A = W^{1/2} X_*
        let mut a = xstar.clone();
        for i in 0..n {
            for j in 0..p1 {
                a[(i, j)] *= wsqrt[i];
            }
        }
        let ata = a.transpose() * &a;
        let chol = ata
            .clone()
            .cholesky()
            .ok_or_else(|| Error::validation("X_*' W X_* is singular: collinear covariates"))?;
        let ata_inv = chol.inverse();
        let proj = DMatrix::identity(n, n) - &a * ata_inv * a.transpose();

        // Symmetry / idempotence audit.
        let sym_defect = (&proj - proj.transpose()).amax();
        let idem_defect = (&proj * &proj - &proj).amax();
        let projector_defect = sym_defect.max(idem_defect);

        let (vals, vecs) = sym_eigen_sorted(&proj);
        let m = vals.iter().filter(|&&v| v > 0.5).count();
        if m != n - p1 {
            return Err(Error::numeric(format!(
                "projector rank {m}, expected {}",
                n - p1
            )));
        }
        let l = vecs.columns(n - m, m).into_owned();

        // W^{-1/2} L L' W^{1/2}
        let mut restriction = &l * l.transpose();
        for i in 0..n {
            for j in 0..n {
                restriction[(i, j)] *= wsqrt[j] / wsqrt[i];
            }
        }
        let mut xtw = xstar.transpose();
        for j in 0..n {
            for i in 0..p1 {
                xtw[(i, j)] *= weights[j];
            }
        }
        Ok(RsrProjection {
            l,
            restriction,
            xtw,
            projector_defect,
        })
    }

    /// Restricted random effect `u` from the raw field.
    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(xi);
        (&self.restriction * v).iter().copied().collect()
    }

    /// `|X_*' W u| / (|X_*' W| |u|)`, the relative leakage of `u` into the
    /// fixed-effect span.
    pub fn relative_orthogonality(&self, u: &[f64]) -> f64 {
        let uv = DVector::from_column_slice(u);
        let unorm = uv.norm();
        if unorm == 0.0 {
            return 0.0;
        }
        (&self.xtw * uv).norm() / (self.xtw.norm() * unorm)
    }
}

/// Restricted spatial regression with weights taken from a completed spatial
/// fit on the same dataset.
pub fn fit_rsr(
    d: &Dataset,
    qp: &IcarPrecision,
    prior: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSummary> {
    let spatial = fit_spatial_icar(
        d,
        qp,
        prior,
        &cfg.with_seed(mix_seed(cfg.seed, 0x5704)),
    )?;
    fit_rsr_with_weights(d, qp, &FittedWeights::from_spatial_fit(&spatial), prior, cfg)
}

/// Restricted spatial regression with explicit weights.
pub fn fit_rsr_with_weights(
    d: &Dataset,
    qp: &IcarPrecision,
    what: &FittedWeights,
    prior: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSummary> {
    prior.validate()?;
    cfg.validate()?;
    if qp.n() != d.n() {
        return Err(Error::validation("precision/dataset dimension mismatch"));
    }
    let ctx = PoissonContext::new(d);
    let (n, p) = (d.n(), d.p());
    let x = d.x.clone();
    let projection = RsrProjection::new(&d.x, &what.0)?;
    let field0 = 1 + p;
    let s_idx = field0 + n;
    let rank = qp.rank() as f64;

    let restriction = projection.restriction.clone();
    let eta_of = move |coords: &[f64]| -> Vec<f64> {
        let xi = DVector::from_column_slice(&coords[field0..field0 + n]);
        let u = &restriction * xi;
        (0..n)
            .map(|i| {
                let mut eta = coords[0] + u[i];
                for j in 0..p {
                    eta += x[(i, j)] * coords[1 + j];
                }
                eta
            })
            .collect()
    };

    let prior_spec = *prior;
    let qp_cl = qp.clone();
    let ctx_ref = &ctx;
    let eta_ref = &eta_of;
    let target = move |coords: &[f64]| -> f64 {
        let s = coords[s_idx];
        let mut lp = log_prior_sd_on_log_scale(s, prior_spec.sigma_upper);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp += log_prior_normal(coords[0], prior_spec.alpha_precision);
        for j in 0..p {
            lp += log_prior_normal(coords[1 + j], prior_spec.beta_precision);
        }
        let sigma2 = (2.0 * s).exp();
        let quad = qp_cl.quad_form(&coords[field0..field0 + n]);
        lp += -rank * s - 0.5 * quad / sigma2;
        lp + ctx_ref.kernel(&eta_ref(coords))
    };

    let mut init = vec![0.0; s_idx + 1];
    init[0] = initial_alpha(&ctx);
    let field_init = initial_field(&ctx, init[0], qp.components());
    init[field0..field0 + n].copy_from_slice(&field_init);
    init[s_idx] = initial_log_sd(&field_init, prior.sigma_upper);

    let groups: Vec<Vec<usize>> = qp
        .components()
        .iter()
        .map(|comp| comp.iter().map(|&i| field0 + i).collect())
        .collect();
    let mut blocks = vec![BlockSpec::plain("alpha", vec![0], 0.1)];
    if p > 0 {
        blocks.push(BlockSpec::plain("beta", (1..=p).collect(), 0.05));
    }
    blocks.extend(chunked_blocks(
        "xi",
        field0..field0 + n,
        FIELD_BLOCK,
        0.1,
        &groups,
    ));
    blocks.push(BlockSpec::plain("log_sigma_xi", vec![s_idx], 0.3));

    let run = run_chains(&target, &init, &blocks, cfg)?;

    // Per-draw audit: the restricted effect must stay orthogonal to the
    // weighted fixed-effect span.
    let mut max_orth: f64 = 0.0;
    for chain in &run.chains {
        for draw in chain {
            let u = projection.apply(&draw[field0..field0 + n]);
            max_orth = max_orth.max(projection.relative_orthogonality(&u));
        }
    }

    let mut names = vec!["alpha".to_string()];
    names.extend(beta_names(p));
    let mut gated = vec![true; names.len()];
    for i in 0..n {
        names.push(format!("xi[{}]", i + 1));
        gated.push(false);
    }
    names.push("sigma_xi".to_string());
    gated.push(true);

    let mut summary = assemble_summary(
        "RSR",
        &ctx,
        &run,
        names,
        &gated,
        move |c| {
            let mut out = c.to_vec();
            out[s_idx] = c[s_idx].exp();
            out
        },
        eta_of,
    )?;
    summary
        .diagnostics
        .insert("rsr_max_relative_orthogonality".into(), max_orth);
    summary
        .diagnostics
        .insert("rsr_projector_defect".into(), projection.projector_defect);
    if max_orth > 1e-8 {
        summary.warnings.push(format!(
            "restricted effect leaked into the covariate span: {max_orth:.2e}"
        ));
    }
    Ok(summary)
}

/// First stage of spatial+: remove the spatial signal from covariate `j`
/// by weighted (penalized) least squares on a spatial basis, back-transform,
/// and standardize the residual.
pub fn spatial_plus_residualize(
    d: &Dataset,
    j: usize,
    what: &FittedWeights,
    cm: &CovariateModel,
) -> Result<Vec<f64>> {
    let n = d.n();
    if j >= d.p() {
        return Err(Error::validation(format!(
            "covariate index {j} out of range for p={}",
            d.p()
        )));
    }
    if what.0.len() != n {
        return Err(Error::validation("weight length does not match areas"));
    }
    if what.0.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::validation("weights must be positive"));
    }
    let wsqrt: Vec<f64> = what.0.iter().map(|w| w.sqrt()).collect();
    let xj: Vec<f64> = d.x.column(j).iter().copied().collect();
    let xt: Vec<f64> = xj.iter().zip(&wsqrt).map(|(x, w)| x * w).collect();

    let (phi, penalty): (&DMatrix<f64>, Option<&TensorPenalty>) = match cm {
        CovariateModel::Eigen(basis) => {
            if basis.vectors.nrows() != n {
                return Err(Error::validation("eigenbasis does not match dataset size"));
            }
            (&basis.vectors, None)
        }
        CovariateModel::Pspline { basis, penalty } => {
            if basis.nrows() != n {
                return Err(Error::validation("spline basis does not match dataset size"));
            }
            if penalty.dim() != basis.ncols() {
                return Err(Error::validation("penalty/basis dimension mismatch"));
            }
            (basis, Some(*penalty))
        }
    };

    let m = phi.ncols();
    let mut z_tilde = xt.clone();
    if m > 0 {
        // Weighted design in the transformed scale.
        let mut phit = phi.clone();
        for i in 0..n {
            for c in 0..m {
                phit[(i, c)] *= wsqrt[i];
            }
        }
        let mut gram = phit.transpose() * &phit;
        if let Some(pen) = penalty {
            gram += &pen.p;
        }
        let rhs = phit.transpose() * DVector::from_column_slice(&xt);
        let coef = gram
            .cholesky()
            .ok_or_else(|| Error::numeric("covariate-model normal equations are singular"))?
            .solve(&rhs);
        let fitted = phit * coef;
        for i in 0..n {
            z_tilde[i] -= fitted[i];
        }
    }
    let mut z: Vec<f64> = z_tilde.iter().zip(&wsqrt).map(|(v, w)| v / w).collect();
    standardize(&mut z).map_err(|_| {
        Error::numeric("residualized covariate is constant; spatial basis explains it exactly")
    })?;
    Ok(z)
}

/// Full spatial+ fit: spatial stage for the weights, residualize every
/// covariate, then fit the final spatial model on the residuals.
pub fn fit_spatial_plus(
    d: &Dataset,
    qp: &IcarPrecision,
    covariate_model: &crate::inference::SpatialPlusCovariateModel,
    final_model: &crate::inference::SpatialPlusFinal,
    pspline: &PsplineSpec,
    prior: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSummary> {
    let spatial = fit_spatial_icar(
        d,
        qp,
        prior,
        &cfg.with_seed(mix_seed(cfg.seed, 0x5704)),
    )?;
    fit_spatial_plus_with_weights(
        d,
        qp,
        &FittedWeights::from_spatial_fit(&spatial),
        covariate_model,
        final_model,
        pspline,
        prior,
        cfg,
    )
}

/// Spatial+ with precomputed first-stage weights.
#[allow(clippy::too_many_arguments)]
pub fn fit_spatial_plus_with_weights(
    d: &Dataset,
    qp: &IcarPrecision,
    what: &FittedWeights,
    covariate_model: &crate::inference::SpatialPlusCovariateModel,
    final_model: &crate::inference::SpatialPlusFinal,
    pspline: &PsplineSpec,
    prior: &PriorSpec,
    cfg: &McmcConfig,
) -> Result<PosteriorSummary> {
    use crate::inference::{SpatialPlusCovariateModel as Cm, SpatialPlusFinal as Fm};

    let n = d.n();
    let p = d.p();
    if p == 0 {
        return Err(Error::validation("spatial+ needs at least one covariate"));
    }

    // Residualize every covariate with the chosen covariate model.
    let mut z = DMatrix::zeros(n, p);
    let mut k_used = None;
    match covariate_model {
        Cm::Eigen(k) => {
            let basis = eigen_lowest_nonnull(qp, *k)?;
            k_used = Some(*k);
            for j in 0..p {
                let col = spatial_plus_residualize(d, j, what, &CovariateModel::Eigen(&basis))?;
                for i in 0..n {
                    z[(i, j)] = col[i];
                }
            }
        }
        Cm::Pspline => {
            let mut s1: Vec<f64> = d.centroids.iter().map(|c| c.0).collect();
            let mut s2: Vec<f64> = d.centroids.iter().map(|c| c.1).collect();
            standardize(&mut s1)
                .map_err(|_| Error::validation("constant longitude coordinates"))?;
            standardize(&mut s2)
                .map_err(|_| Error::validation("constant latitude coordinates"))?;
            let tb = tensor_basis_at(&s1, &s2, pspline.n_internal_knots, pspline.degree)?;
            let pen = tensor_penalty(tb.k1, tb.k2, pspline.cov_lambda1, pspline.cov_lambda2)?;
            for j in 0..p {
                let col = spatial_plus_residualize(
                    d,
                    j,
                    what,
                    &CovariateModel::Pspline {
                        basis: &tb.b,
                        penalty: &pen,
                    },
                )?;
                for i in 0..n {
                    z[(i, j)] = col[i];
                }
            }
        }
    }

    let residual_data = Dataset::new(
        d.y.clone(),
        d.e.clone(),
        z,
        d.centroids.clone(),
        d.labels.clone(),
    )?;

    let final_cfg = cfg.with_seed(mix_seed(cfg.seed, 0x5B17));
    let mut summary = match final_model {
        Fm::Icar => fit_spatial_icar(&residual_data, qp, prior, &final_cfg)?,
        Fm::Pspline => fit_spatial_pspline(&residual_data, pspline, prior, &final_cfg)?,
    };
    summary.model = "SpatialPlus".to_string();
    if let Some(k) = k_used {
        summary.diagnostics.insert("spatial_plus_k".into(), k as f64);
    } else {
        summary.diagnostics.insert(
            "spatial_plus_spline_dim".into(),
            (pspline.n_internal_knots + pspline.degree - 1).pow(2) as f64,
        );
    }
    Ok(summary)
}
