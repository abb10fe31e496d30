use spconf::areal::icar_precision;
use spconf::inference::{fit_spatial_icar, fit_spatial_plus_with_weights, FittedWeights,
    McmcConfig, PriorSpec, SpatialPlusCovariateModel, SpatialPlusFinal, PsplineSpec};
use spconf::simstudy::{desk_map, gen_scenario, ScenarioSpec};

#[test]
#[ignore]
fn autopsy_bad_fit() {
    let map = desk_map(10, 7, 4242).unwrap();
    let qp = icar_precision(&map.graph);
    let spec = ScenarioSpec { replicates: 3, seed: 99, ..ScenarioSpec::new(2, 0.5, 1) };
    let sims = gen_scenario(&spec, &map).unwrap();
    let cfg = McmcConfig { chains: 2, iterations: 6000, burn_in: 2000, thin: 4, seed: 5, adaptation_window: 50 };
    let prior = PriorSpec::default();
    let d = &sims[1].dataset;
    let sp = fit_spatial_icar(d, &qp, &prior, &cfg).unwrap();
    let w = FittedWeights::from_spatial_fit(&sp);
    let fit = fit_spatial_plus_with_weights(d, &qp, &w,
        &SpatialPlusCovariateModel::Eigen(15), &SpatialPlusFinal::Icar,
        &PsplineSpec::default(), &prior, &cfg).unwrap();
    println!("waic={:.0} warnings={:?}", fit.waic, fit.warnings);
    // worst-mixing parameters
    let mut worst: Vec<(f64, String, f64)> = fit.params.iter()
        .map(|p| (p.rhat, p.name.clone(), p.ess)).collect();
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (rhat, name, ess) in worst.iter().take(6) {
        println!("rhat {rhat:.3} {name} ess {ess:.0}");
    }
    // worst pointwise fit
    let n = d.n();
    let s = fit.loglik.len();
    for i in 0..n {
        let mean_ll: f64 = fit.loglik.iter().map(|row| row[i]).sum::<f64>() / s as f64;
        if mean_ll < -20.0 {
            println!("area {i}: mean ll {:.1}, y={} e={:.0} fitted_mu={:.2}", mean_ll, d.y[i], d.e[i], fit.fitted_mu[i]);
        }
    }
    // per-chain sigma means
    for (c, chain) in fit.draws.iter().enumerate() {
        let idx = fit.param_names.iter().position(|p| p == "sigma_xi").unwrap();
        let m: f64 = chain.iter().map(|d| d[idx]).sum::<f64>() / chain.len() as f64;
        let aidx = fit.param_names.iter().position(|p| p == "alpha").unwrap();
        let am: f64 = chain.iter().map(|d| d[aidx]).sum::<f64>() / chain.len() as f64;
        println!("chain {c}: sigma mean {m:.3} alpha mean {am:.3}");
    }
}
