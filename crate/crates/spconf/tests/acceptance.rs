//! Release gate: one test per criterion, each printing a pass/fail line per
//! sub-check at its stated tolerance.
//!
//! Criteria 1-3 are algebra/oracle/sampler checks; criteria 4 and 5 run the
//! desk-scale simulation studies on the 10x7 lattice map. Run with
//! `--nocapture` to see the per-check lines.

mod common;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Poisson, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{gauss_solve, irls_poisson, jacobi_eigen, pinv_oracle};
use spconf::areal::{eigen_lowest_nonnull, icar_precision, AreaGraph};
use spconf::inference::diagnostics::{effective_sample_size, waic};
use spconf::inference::engine::{run_chains, BlockSpec};
use spconf::inference::{
    fit_null, fit_rsr_with_weights, spatial_plus_residualize, CovariateModel, Dataset,
    FittedWeights, McmcConfig, PriorSpec, RsrProjection,
};
use spconf::metrics::{marb_mrrmse, se_sim_and_est, MarbVariant};
use spconf::simstudy::{
    desk_map, gen_icar_field, parse_model_list, run_study, ScenarioSpec, StudyRun,
};
use spconf::splines::{bspline_basis, sample_penalized_coefficients, tensor_penalty};
use spconf::standardize;
use spconf::tgmrf::{scaled_car_precision, tgmrf_log_density, GammaMarginalSpec, GammaVariant};

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Gate { failures: Vec::new() }
    }

    fn check(&mut self, label: &str, ok: bool) {
        println!("[{}] {label}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures.push(label.to_string());
        }
    }

    fn finish(self, criterion: &str) {
        assert!(
            self.failures.is_empty(),
            "{criterion}: {} failed checks: {:#?}",
            self.failures.len(),
            self.failures
        );
    }
}

fn random_graph(n: usize, density: f64, seed: u64) -> AreaGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.random::<f64>() < density {
                edges.push((a, b));
            }
        }
    }
    AreaGraph::new(n, &edges).unwrap()
}

fn synthetic_dataset(n: usize, beta: f64, seed: u64, e_scale: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.61).sin()).collect();
    standardize(&mut col).unwrap();
    let e: Vec<f64> = (0..n)
        .map(|i| e_scale * (1.0 + (i % 5) as f64 * 0.4))
        .collect();
    let y: Vec<u64> = (0..n)
        .map(|i| {
            let mu = e[i] * (0.15 + beta * col[i]).exp();
            Poisson::new(mu).unwrap().sample(&mut rng) as u64
        })
        .collect();
    let centroids: Vec<(f64, f64)> = (0..n).map(|i| ((i % 8) as f64, (i / 8) as f64)).collect();
    Dataset::new(
        y,
        e,
        DMatrix::from_column_slice(n, 1, &col),
        centroids,
        (0..n).map(|i| format!("a{i}")).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_1_algebraic_invariants() {
    let t0 = Instant::now();
    let mut gate = Gate::new();

    // ICAR precision row sums / structure / rank on 50 random graphs.
    let mut icar_ok = true;
    for seed in 0..50u64 {
        let n = 4 + (seed as usize % 27);
        let g = random_graph(n, 0.3, 9_000 + seed);
        let qp = icar_precision(&g);
        for i in 0..n {
            let row_sum: f64 = qp.q().row(i).iter().sum();
            icar_ok &= row_sum.abs() <= 1e-12;
            icar_ok &= qp.q()[(i, i)] == qp.degrees()[i] as f64;
            for j in 0..n {
                if i != j {
                    let v = qp.q()[(i, j)];
                    icar_ok &= v == 0.0 || v == -1.0;
                }
            }
        }
        let (vals, _) = jacobi_eigen(qp.q());
        let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
        let num_rank = vals.iter().filter(|&&v| v > 1e-9 * vmax.max(1e-12)).count();
        icar_ok &= num_rank == qp.rank();
        icar_ok &= vals[0] > -1e-9 * vmax.max(1.0);
    }
    gate.check("criterion 1: ICAR row sums, structure and rank on 50 random graphs", icar_ok);

    // RSR projector idempotence/symmetry and per-draw orthogonality.
    let d = synthetic_dataset(20, 0.3, 71, 60.0);
    let proj = RsrProjection::new(&d.x, &d.e).unwrap();
    gate.check(
        "criterion 1: RSR projector symmetric and idempotent within 1e-10",
        proj.projector_defect < 1e-10,
    );
    let g = spconf::areal::lattice_graph(4, 5).unwrap();
    let qp = icar_precision(&g);
    let cfg = McmcConfig {
        chains: 2,
        iterations: 1500,
        burn_in: 500,
        thin: 5,
        seed: 33,
        adaptation_window: 50,
    };
    let w = FittedWeights(d.e.clone());
    let rsr = fit_rsr_with_weights(&d, &qp, &w, &PriorSpec::default(), &cfg).unwrap();
    let orth = rsr.diagnostics["rsr_max_relative_orthogonality"];
    gate.check(
        &format!("criterion 1: RSR per-draw orthogonality {orth:.2e} < 1e-8"),
        orth < 1e-8,
    );

    // Copula scaling: unit correlation diagonal on the rho grid.
    let path6 = AreaGraph::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
    let mut diag_ok = true;
    for k in 0..10 {
        let rho = k as f64 * 0.1;
        let prec = scaled_car_precision(&path6, rho).unwrap();
        for v in prec.correlation_diagonal() {
            diag_ok &= (v - 1.0).abs() < 1e-8;
        }
    }
    gate.check(
        "criterion 1: copula correlation diagonal = 1 within 1e-8 on rho grid",
        diag_ok,
    );

    // B-spline partition of unity.
    let mut pou_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for degree in 1..=3 {
        let xs: Vec<f64> = (0..80).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let (_, b) = bspline_basis(&xs, 9, degree).unwrap();
        for i in 0..b.nrows() {
            let s: f64 = b.row(i).iter().sum();
            pou_ok &= (s - 1.0).abs() < 1e-10;
        }
    }
    gate.check("criterion 1: B-spline partition of unity within 1e-10", pou_ok);

    // Tensor penalty null-space dimension.
    let pen = tensor_penalty(5, 6, 1.22, 8.87).unwrap();
    let (vals, _) = jacobi_eigen(&pen.p);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let nulls = vals.iter().filter(|&&v| v < 1e-9 * vmax).count();
    gate.check(
        &format!("criterion 1: tensor penalty null-space dimension {nulls} = 4"),
        nulls == 4,
    );

    println!("criterion 1 elapsed: {:.1?}", t0.elapsed());
    gate.finish("criterion 1");
}

#[test]
fn criterion_2_oracle_equivalence() {
    let t0 = Instant::now();
    let mut gate = Gate::new();

    // Null-model posterior vs IRLS MLE on 20 simulated datasets.
    let cfg = McmcConfig {
        chains: 2,
        iterations: 4000,
        burn_in: 1000,
        thin: 5,
        seed: 1,
        adaptation_window: 50,
    };
    let mut mle_ok = true;
    for seed in 0..20u64 {
        let d = synthetic_dataset(50, 0.4, 300 + seed, 80.0);
        let fit = fit_null(&d, &PriorSpec::default(), &cfg.with_seed(40 + seed)).unwrap();
        let yf: Vec<f64> = d.y.iter().map(|&v| v as f64).collect();
        let (mle, _) = irls_poisson(&yf, &d.e, &d.x);
        let a = fit.param("alpha").unwrap();
        let b = fit.param("beta[1]").unwrap();
        mle_ok &= (a.mean - mle[0]).abs() < 2.0 * a.sd;
        mle_ok &= (b.mean - mle[1]).abs() < 2.0 * b.sd;
    }
    gate.check(
        "criterion 2: null posterior within 2 sd of IRLS MLE on 20 datasets",
        mle_ok,
    );

    // Residualizer vs dense weighted least squares (n <= 10).
    let path = AreaGraph::new(8, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)])
        .unwrap();
    let qp = icar_precision(&path);
    let basis = eigen_lowest_nonnull(&qp, 3).unwrap();
    let d = synthetic_dataset(8, 0.3, 5, 40.0);
    let w = FittedWeights(vec![0.7, 1.4, 2.2, 0.9, 3.1, 1.8, 1.1, 2.6]);
    let z = spatial_plus_residualize(&d, 0, &w, &CovariateModel::Eigen(&basis)).unwrap();
    let wsqrt: Vec<f64> = w.0.iter().map(|v| v.sqrt()).collect();
    let xt: Vec<f64> = (0..8).map(|i| d.x[(i, 0)] * wsqrt[i]).collect();
    let mut phit = DMatrix::zeros(8, 3);
    for i in 0..8 {
        for c in 0..3 {
            phit[(i, c)] = basis.vectors[(i, c)] * wsqrt[i];
        }
    }
    let gram = phit.transpose() * &phit;
    let rhs: Vec<f64> = (0..3)
        .map(|c| (0..8).map(|i| phit[(i, c)] * xt[i]).sum())
        .collect();
    let coef = gauss_solve(&gram, &rhs);
    let mut z_oracle: Vec<f64> = (0..8)
        .map(|i| {
            let fitted: f64 = (0..3).map(|c| phit[(i, c)] * coef[c]).sum();
            (xt[i] - fitted) / wsqrt[i]
        })
        .collect();
    standardize(&mut z_oracle).unwrap();
    let max_diff = z
        .iter()
        .zip(&z_oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    gate.check(
        &format!("criterion 2: residualizer vs normal-equations oracle, max diff {max_diff:.2e} < 1e-10"),
        max_diff < 1e-10,
    );

    // Formula recomputation at 1e-12: WAIC, MARB/MRRMSE, standard errors.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let means: Vec<f64> = (0..100)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.2 + 0.03 * z
        })
        .collect();
    let sds: Vec<f64> = (0..100).map(|_| 0.02 + 0.005 * rng.random::<f64>()).collect();
    let (se_sim, se_est) = se_sim_and_est(&means, &sds).unwrap();
    let k = 100.0;
    let mbar = means.iter().sum::<f64>() / k;
    let d_sim = (means.iter().map(|m| (m - mbar) * (m - mbar)).sum::<f64>() / k).sqrt();
    let d_est = sds.iter().sum::<f64>() / k;
    let (marb, mrrmse) = marb_mrrmse(&means, 0.2, MarbVariant::AbsOfMean).unwrap();
    let rel: Vec<f64> = means.iter().map(|m| (m - 0.2) / 0.2).collect();
    let d_marb = (rel.iter().sum::<f64>() / k).abs();
    let d_mrrmse = (rel.iter().map(|r| r * r).sum::<f64>() / k).sqrt();
    let ll: Vec<Vec<f64>> = (0..60)
        .map(|_| {
            (0..9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    -2.0 + 0.4 * z
                })
                .collect()
        })
        .collect();
    let w_val = waic(&ll).unwrap();
    let mut w_direct = 0.0;
    for i in 0..9 {
        let col: Vec<f64> = ll.iter().map(|row| row[i]).collect();
        let lppd = (col.iter().map(|v| v.exp()).sum::<f64>() / 60.0).ln();
        let m = col.iter().sum::<f64>() / 60.0;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 59.0;
        w_direct += lppd - var;
    }
    let formulas_ok = (se_sim - d_sim).abs() < 1e-12
        && (se_est - d_est).abs() < 1e-12
        && (marb - d_marb).abs() < 1e-12
        && (mrrmse - d_mrrmse).abs() < 1e-12
        && (w_val + 2.0 * w_direct).abs() < 1e-12;
    gate.check(
        "criterion 2: WAIC/MARB/MRRMSE/se formulas match direct recomputation within 1e-12",
        formulas_ok,
    );

    // Singular-Gaussian samplers: Monte Carlo covariance vs pseudo-inverse.
    let path4 = AreaGraph::new(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let qp4 = icar_precision(&path4);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut cov = DMatrix::<f64>::zeros(4, 4);
    for _ in 0..10_000 {
        let f = gen_icar_field(&qp4, 0.2, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                cov[(i, j)] += f[i] * f[j];
            }
        }
    }
    cov /= 10_000.0;
    let target = pinv_oracle(qp4.q(), 1e-9) * 0.2;
    let rel_field = (&cov - &target).norm() / target.norm();
    gate.check(
        &format!("criterion 2: ICAR field MC covariance vs pseudo-inverse, rel {rel_field:.3} < 0.05"),
        rel_field < 0.05,
    );

    let pen = tensor_penalty(4, 4, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut cov = DMatrix::<f64>::zeros(16, 16);
    for _ in 0..10_000 {
        let theta = sample_penalized_coefficients(&pen, &mut rng).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                cov[(i, j)] += theta[i] * theta[j];
            }
        }
    }
    cov /= 10_000.0;
    let target = pinv_oracle(&pen.p, 1e-9);
    let rel_pen = (&cov - &target).norm() / target.norm();
    gate.check(
        &format!("criterion 2: penalized-coefficient MC covariance vs pseudo-inverse, rel {rel_pen:.3} < 0.05"),
        rel_pen < 0.05,
    );

    println!("criterion 2 elapsed: {:.1?}", t0.elapsed());
    gate.finish("criterion 2");
}

#[test]
fn criterion_3_sampler_correctness() {
    let t0 = Instant::now();
    let mut gate = Gate::new();

    // Conjugate normal-normal ground truth within 3 Monte Carlo ses.
    let (mu0, tau0, sigma) = (1.0f64, 0.5f64, 0.8f64);
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let ys: Vec<f64> = (0..25)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.7 + sigma * z
        })
        .collect();
    let tau_post = tau0 + 25.0 / (sigma * sigma);
    let mean_post = (tau0 * mu0 + ys.iter().sum::<f64>() / (sigma * sigma)) / tau_post;
    let var_post = 1.0 / tau_post;
    let target = move |x: &[f64]| -> f64 {
        let t = x[0];
        -0.5 * tau0 * (t - mu0) * (t - mu0)
            - ys.iter().map(|y| 0.5 * (y - t) * (y - t) / (sigma * sigma)).sum::<f64>()
    };
    let blocks = vec![BlockSpec::plain("theta", vec![0], 0.3)];
    let cfg = McmcConfig {
        chains: 3,
        iterations: 20_000,
        burn_in: 4_000,
        thin: 1,
        seed: 9,
        adaptation_window: 50,
    };
    let run = run_chains(&target, &[mu0], &blocks, &cfg).unwrap();
    let pooled: Vec<f64> = run.chains.iter().flatten().map(|d| d[0]).collect();
    let per_chain: Vec<Vec<f64>> = run
        .chains
        .iter()
        .map(|c| c.iter().map(|d| d[0]).collect())
        .collect();
    let ess = effective_sample_size(&per_chain);
    let m = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let v = pooled.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (pooled.len() as f64 - 1.0);
    let mean_ok = (m - mean_post).abs() < 3.0 * (var_post / ess).sqrt();
    let var_ok = (v - var_post).abs() < 3.0 * var_post * (2.0 / ess).sqrt();
    gate.check(
        &format!("criterion 3: conjugate posterior mean/variance within 3 MC se (ess {ess:.0})"),
        mean_ok && var_ok,
    );

    // Simulation-based calibration on a one-parameter Poisson-gamma model.
    let replicates = 200;
    let bins = 20;
    let posterior_draws = bins - 1;
    let mut hist = vec![0usize; bins];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for rep in 0..replicates {
        let lambda_true: f64 = GammaDist::new(2.0, 1.0).unwrap().sample(&mut rng);
        let y = Poisson::new(10.0 * lambda_true).unwrap().sample(&mut rng);
        let target = move |x: &[f64]| -> f64 {
            let t = x[0];
            if t.abs() > 20.0 {
                return f64::NEG_INFINITY;
            }
            let lam = t.exp();
            2.0 * t - lam + (y * t - 10.0 * lam)
        };
        let blocks = vec![BlockSpec::plain("log_lambda", vec![0], 0.4)];
        let c = McmcConfig {
            chains: 1,
            iterations: 4_000,
            burn_in: 1_000,
            thin: 1,
            seed: 60_000 + rep as u64,
            adaptation_window: 50,
        };
        let run = run_chains(&target, &[0.0], &blocks, &c).unwrap();
        let draws: Vec<f64> = run.chains[0].iter().map(|d| d[0].exp()).collect();
        let step = draws.len() / posterior_draws;
        let thinned: Vec<f64> = (0..posterior_draws).map(|j| draws[j * step]).collect();
        let rank = thinned.iter().filter(|&&d| d < lambda_true).count();
        hist[rank] += 1;
    }
    let expect = replicates as f64 / bins as f64;
    let stat: f64 = hist
        .iter()
        .map(|&o| {
            let diff = o as f64 - expect;
            diff * diff / expect
        })
        .sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    gate.check(
        &format!("criterion 3: SBC rank histogram uniform (chi-square {stat:.1}, p {p:.3} > 0.01)"),
        p > 0.01,
    );

    // Bivariate TGMRF density integrates to one.
    let g2 = AreaGraph::new(2, &[(0, 1)]).unwrap();
    let prec = scaled_car_precision(&g2, 0.5).unwrap();
    let spec = GammaMarginalSpec::new(GammaVariant::Scale, 1.0, vec![0.0, 0.0]).unwrap();
    let steps = 900;
    let h = 14.0 / steps as f64;
    let mut total = 0.0;
    for i in 0..steps {
        let r1 = (i as f64 + 0.5) * h;
        for j in 0..steps {
            let r2 = (j as f64 + 0.5) * h;
            total += tgmrf_log_density(&[r1, r2], &spec, &prec).unwrap().exp();
        }
    }
    total *= h * h;
    gate.check(
        &format!("criterion 3: bivariate TGMRF density integrates to {total:.5} (1 within 1e-3)"),
        (total - 1.0).abs() < 1e-3,
    );

    println!("criterion 3 elapsed: {:.1?}", t0.elapsed());
    gate.finish("criterion 3");
}

fn study_cfg(seed: u64) -> McmcConfig {
    McmcConfig {
        chains: 2,
        iterations: 5000,
        burn_in: 1500,
        thin: 5,
        seed,
        adaptation_window: 50,
    }
}

fn run_cell(scenario: u8, cor: f64, study: u8, k: usize, models: &str) -> StudyRun {
    let map = desk_map(10, 7, 4242).unwrap();
    let spec = ScenarioSpec {
        replicates: k,
        seed: 99,
        ..ScenarioSpec::new(scenario, cor, study)
    };
    let models = parse_model_list(models).unwrap();
    run_study(&spec, &map, &models, &PriorSpec::default(), &study_cfg(5), 8).unwrap()
}

#[test]
fn criterion_4_simulation_study_one() {
    let t0 = Instant::now();
    let mut gate = Gate::new();
    let models = "Null,Spatial,RSR,TGMRF1,SpatPlus5,SpatPlus10,SpatPlus15,SpatPlus20";
    let k = 50;

    // scenario -> cor -> study run
    let mut runs: Vec<Vec<StudyRun>> = Vec::new();
    for scenario in [1u8, 2, 3] {
        let mut row = Vec::new();
        for cor in [0.8, 0.5, 0.2] {
            row.push(run_cell(scenario, cor, 1, k, models));
        }
        runs.push(row);
    }

    let value = |run: &StudyRun, model: &str, metric: &str| -> f64 {
        run.summary
            .value(model, metric)
            .unwrap_or_else(|| panic!("missing {model}/{metric}"))
    };

    // (a) Scenario 2, cor 0.8 levels.
    let s2_08 = &runs[1][0];
    for model in ["Null", "RSR"] {
        let m = value(s2_08, model, "beta1_mean");
        gate.check(
            &format!("criterion 4a: scenario 2 cor 0.8 {model} mean beta1 {m:.4} >= 0.45"),
            m >= 0.45,
        );
    }
    for model in ["SpatPlus15", "SpatPlus20"] {
        let m = value(s2_08, model, "beta1_mean");
        gate.check(
            &format!("criterion 4a: scenario 2 cor 0.8 {model} mean beta1 {m:.4} in 0.2 +- 0.08"),
            (0.12..=0.28).contains(&m),
        );
    }

    // (b) Bias strictly decreases as correlation drops, per scenario/model.
    for (si, scenario) in [1u8, 2, 3].iter().enumerate() {
        for model in ["Null", "Spatial", "RSR", "TGMRF1"] {
            let b: Vec<f64> = (0..3)
                .map(|ci| (value(&runs[si][ci], model, "beta1_mean") - 0.2).abs())
                .collect();
            gate.check(
                &format!(
                    "criterion 4b: scenario {scenario} {model} bias monotone {:.4} > {:.4} > {:.4}",
                    b[0], b[1], b[2]
                ),
                b[0] > b[1] && b[1] > b[2],
            );
        }
    }

    // (c) Coverage levels in scenario 2.
    for (ci, cor) in [0.8, 0.5].iter().enumerate() {
        for model in ["Null", "RSR"] {
            let c = value(&runs[1][ci], model, "beta1_coverage95");
            gate.check(
                &format!("criterion 4c: scenario 2 cor {cor} {model} coverage {c:.0}% <= 10%"),
                c <= 10.0,
            );
        }
    }
    for (ci, cor) in [0.8, 0.5, 0.2].iter().enumerate() {
        let c = value(&runs[1][ci], "SpatPlus10", "beta1_coverage95");
        gate.check(
            &format!("criterion 4c: scenario 2 cor {cor} SpatPlus10 coverage {c:.0}% >= 90%"),
            c >= 90.0,
        );
    }

    // (d) Standard-error ordering and calibration, every cell.
    for (si, scenario) in [1u8, 2, 3].iter().enumerate() {
        for (ci, cor) in [0.8, 0.5, 0.2].iter().enumerate() {
            let run = &runs[si][ci];
            let se_sp = value(run, "Spatial", "beta1_se_est");
            let se_null = value(run, "Null", "beta1_se_est");
            gate.check(
                &format!(
                    "criterion 4d: scenario {scenario} cor {cor} se_est Spatial {se_sp:.4} > Null {se_null:.4}"
                ),
                se_sp > se_null,
            );
            let se_sim = value(run, "Null", "beta1_se_sim");
            let rel = (se_null - se_sim).abs() / se_sim;
            gate.check(
                &format!(
                    "criterion 4d: scenario {scenario} cor {cor} Null se_est {se_null:.4} within 30% of se_sim {se_sim:.4} (rel {rel:.2})"
                ),
                rel <= 0.30,
            );
        }
    }

    // Replicate-level WAIC ordering in scenario 2 (spatial beats null).
    let mut waic_ok = true;
    for run in &runs[1] {
        for rep in 0..k {
            let null = run
                .records
                .iter()
                .find(|r| r.replicate == rep && r.model == "Null");
            let spatial = run
                .records
                .iter()
                .find(|r| r.replicate == rep && r.model == "Spatial");
            if let (Some(n), Some(s)) = (null, spatial) {
                waic_ok &= s.waic < n.waic;
            }
        }
    }
    gate.check(
        "criterion 4: WAIC(Spatial) < WAIC(Null) on every scenario-2 replicate",
        waic_ok,
    );

    println!("criterion 4 elapsed: {:.1?}", t0.elapsed());
    gate.finish("criterion 4");
}

#[test]
fn criterion_5_simulation_study_two() {
    let t0 = Instant::now();
    let mut gate = Gate::new();
    let run = run_cell(2, 0.5, 2, 100, "Null,Spatial,RSR,SpatPlus10");
    let ts = |model: &str| -> f64 {
        run.summary
            .value(model, "beta2_type_s_rate")
            .unwrap_or_else(|| panic!("missing type-S for {model}"))
    };
    for model in ["Null", "RSR"] {
        let t = ts(model);
        gate.check(
            &format!("criterion 5: {model} Type-S rate {t:.0}% >= 70%"),
            t >= 70.0,
        );
    }
    for model in ["Spatial", "SpatPlus10"] {
        let t = ts(model);
        gate.check(
            &format!("criterion 5: {model} Type-S rate {t:.0}% <= 12%"),
            t <= 12.0,
        );
    }
    println!("criterion 5 elapsed: {:.1?}", t0.elapsed());
    gate.finish("criterion 5");
}
