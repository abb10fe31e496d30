//! Convergence diagnostics (split R-hat, autocorrelation ESS) and WAIC.

use crate::error::{Error, Result};
use crate::linalg::{mean, quantile, sample_sd};

/// Split R-hat over per-chain traces of one parameter. Values are clamped
/// at 1 from below (the estimator's sub-1 excursions carry no signal).
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_in_half(chains);
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let chain_means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let grand = mean(&chain_means);
    let b = n / (m - 1.0)
        * chain_means
            .iter()
            .map(|&cm| (cm - grand) * (cm - grand))
            .sum::<f64>();
    let w = split
        .iter()
        .map(|c| {
            let cm = mean(c);
            c.iter().map(|&x| (x - cm) * (x - cm)).sum::<f64>() / (n - 1.0)
        })
        .sum::<f64>()
        / m;
    if w < 1e-300 {
        // Degenerate traces (constant parameter): call it converged.
        return 1.0;
    }
    let var_hat = (n - 1.0) / n * w + b / n;
    (var_hat / w).sqrt().max(1.0)
}

/// Effective sample size by Geyer's initial positive sequence over the
/// chain-averaged autocorrelations.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let split = split_in_half(chains);
    let m = split.len() as f64;
    let n = split[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let n_f = n as f64;
    let chain_means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let w: f64 = split
        .iter()
        .map(|c| {
            let cm = mean(c);
            c.iter().map(|&x| (x - cm) * (x - cm)).sum::<f64>() / (n_f - 1.0)
        })
        .sum::<f64>()
        / m;
    if w < 1e-300 {
        return m * n_f;
    }
    let mut rho = Vec::with_capacity(n);
    for lag in 0..n {
        let mut gamma = 0.0;
        for (ci, chain) in split.iter().enumerate() {
            let cm = chain_means[ci];
            for t in 0..n - lag {
                gamma += (chain[t] - cm) * (chain[t + lag] - cm);
            }
        }
        gamma /= m * (n_f - 1.0);
        rho.push(1.0 - (w - gamma) / w);
    }
    let mut tau = -1.0;
    let mut t = 1;
    while t + 1 < rho.len() {
        let pair = rho[t] + rho[t + 1];
        if pair < 0.0 {
            break;
        }
        tau += pair;
        t += 2;
    }
    tau = tau.max(1.0 / (m * n_f));
    m * n_f / (1.0 + 2.0 * tau)
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let mid = c.len() / 2;
        out.push(c[..mid].to_vec());
        out.push(c[mid..].to_vec());
    }
    out
}

/// Watanabe-Akaike information criterion on the deviance scale:
/// `-2 * sum_i [ log mean_s exp(ll[s][i]) - var_s(ll[s][i]) ]`.
///
/// `loglik` has one row per retained draw and one column per observation.
pub fn waic(loglik: &[Vec<f64>]) -> Result<f64> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::validation("WAIC needs at least 2 draws"));
    }
    let n = loglik[0].len();
    for row in loglik {
        if row.len() != n {
            return Err(Error::validation("ragged log-likelihood matrix"));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite log-likelihood entry"));
        }
    }
    let s_f = s as f64;
    let mut total = 0.0;
    for i in 0..n {
        let col: Vec<f64> = loglik.iter().map(|row| row[i]).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lppd = max + (col.iter().map(|&v| (v - max).exp()).sum::<f64>() / s_f).ln();
        let m = mean(&col);
        let var = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / (s_f - 1.0);
        total += lppd - var;
    }
    Ok(-2.0 * total)
}

/// Mean, sd and central 95% interval of a pooled sample.
pub fn summarize_draws(all: &[f64]) -> (f64, f64, f64, f64) {
    (
        mean(all),
        sample_sd(all),
        quantile(all, 0.025),
        quantile(all, 0.975),
    )
}
