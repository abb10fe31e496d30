//! Oracle checks and property tests for the graph, precision and spline
//! layers.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{jacobi_eigen, pinv_oracle};
use spconf::areal::{eigen_lowest_nonnull, icar_precision, AreaGraph};
use spconf::simstudy::gen_icar_field;
use spconf::splines::{bspline_basis, sample_penalized_coefficients, tensor_penalty};

fn random_graph(n: usize, density: f64, seed: u64) -> AreaGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random::<f64>() < density {
                    edges.push((a, b));
                }
            }
        }
        if let Ok(g) = AreaGraph::new(n, &edges) {
            return g;
        }
    }
}

#[test]
fn spectral_basis_matches_jacobi_oracle() {
    // Reconstruction on random small graphs: the returned eigenpairs must
    // reproduce the action of Q and agree with an independent Jacobi solve.
    for seed in 0..10u64 {
        let n = 5 + (seed as usize % 8);
        let g = random_graph(n, 0.4, 1000 + seed);
        let qp = icar_precision(&g);
        let k = qp.rank().min(3);
        let basis = eigen_lowest_nonnull(&qp, k).unwrap();
        assert_eq!(basis.null_dim, qp.n_components());

        let (oracle_vals, _) = jacobi_eigen(qp.q());
        for j in 0..k {
            let lam = basis.eigenvalues[j];
            let oracle = oracle_vals[basis.null_dim + j];
            assert!(
                (lam - oracle).abs() < 1e-8 * oracle.max(1.0),
                "seed {seed} eigenvalue {j}: {lam} vs oracle {oracle}"
            );
            // Q v = lambda v within relative 1e-8.
            let v: DVector<f64> = basis.vectors.column(j).into();
            let qv = qp.q() * &v;
            let resid = (&qv - &v * lam).norm();
            assert!(resid < 1e-8 * lam.max(1.0), "residual {resid}");
        }
    }
}

#[test]
fn icar_field_covariance_matches_pseudoinverse() {
    // Path-4 graph, 10^4 draws: Monte Carlo covariance of the range-space
    // sampler vs sigma2 * pinv(Q).
    let g = AreaGraph::new(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let qp = icar_precision(&g);
    let sigma2 = 0.2;
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut cov = DMatrix::<f64>::zeros(4, 4);
    for _ in 0..draws {
        let f = gen_icar_field(&qp, sigma2, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                cov[(i, j)] += f[i] * f[j];
            }
        }
    }
    cov /= draws as f64;
    let target = pinv_oracle(qp.q(), 1e-9) * sigma2;
    let rel = (&cov - &target).norm() / target.norm();
    assert!(rel < 0.05, "relative covariance error {rel}");
}

#[test]
fn penalized_coefficient_covariance_matches_pseudoinverse() {
    let pen = tensor_penalty(4, 4, 1.0, 1.0).unwrap();
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut cov = DMatrix::<f64>::zeros(16, 16);
    for _ in 0..draws {
        let theta = sample_penalized_coefficients(&pen, &mut rng).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                cov[(i, j)] += theta[i] * theta[j];
            }
        }
    }
    cov /= draws as f64;
    let target = pinv_oracle(&pen.p, 1e-9);
    let rel = (&cov - &target).norm() / target.norm();
    assert!(rel < 0.05, "relative covariance error {rel}");
}

#[test]
fn cubic_bspline_matches_recursive_oracle_at_points() {
    // Direct Cox-de Boor recursion, written independently, evaluated at a
    // handful of points.
    fn cox_de_boor(knots: &[f64], j: usize, d: usize, x: f64) -> f64 {
        if d == 0 {
            return if knots[j] <= x && x < knots[j + 1] {
                1.0
            } else {
                0.0
            };
        }
        let left_den = knots[j + d] - knots[j];
        let right_den = knots[j + d + 1] - knots[j + 1];
        let left = if left_den > 0.0 {
            (x - knots[j]) / left_den * cox_de_boor(knots, j, d - 1, x)
        } else {
            0.0
        };
        let right = if right_den > 0.0 {
            (knots[j + d + 1] - x) / right_den * cox_de_boor(knots, j + 1, d - 1, x)
        } else {
            0.0
        };
        left + right
    }

    let xs = vec![0.0, 0.17, 0.5, 0.83, 0.999];
    let (basis, b) = bspline_basis(&xs, 6, 3).unwrap();
    for (i, &x) in xs.iter().enumerate() {
        for j in 0..basis.n_basis {
            let expect = cox_de_boor(&basis.knots, j, 3, x);
            assert!(
                (b[(i, j)] - expect).abs() < 1e-12,
                "x={x} basis {j}: {} vs {expect}",
                b[(i, j)]
            );
        }
    }
}

#[test]
fn penalty_null_space_dimension_is_four() {
    let pen = tensor_penalty(4, 4, 1.0, 1.0).unwrap();
    let (vals, _) = jacobi_eigen(&pen.p);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let nulls = vals.iter().filter(|&&v| v < 1e-9 * vmax).count();
    assert_eq!(nulls, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn icar_invariants_on_random_graphs(seed in 0u64..4000, n in 2usize..14) {
        let g = random_graph(n, 0.35, seed);
        let qp = icar_precision(&g);
        // Row sums exactly zero, off-diagonals in {0, -1}, diagonal = degree.
        for i in 0..n {
            let row_sum: f64 = qp.q().row(i).iter().sum();
            prop_assert_eq!(row_sum, 0.0);
            for j in 0..n {
                if i != j {
                    let v = qp.q()[(i, j)];
                    prop_assert!(v == 0.0 || v == -1.0);
                }
            }
            prop_assert_eq!(qp.q()[(i, i)], qp.degrees()[i] as f64);
        }
        let trace: f64 = (0..n).map(|i| qp.q()[(i, i)]).sum();
        prop_assert_eq!(trace, 2.0 * g.edges().len() as f64);
        // PSD and numerical rank equals the structural rank.
        let (vals, _) = jacobi_eigen(qp.q());
        let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
        prop_assert!(vals[0] > -1e-9 * vmax.max(1.0));
        let num_rank = vals.iter().filter(|&&v| v > 1e-9 * vmax.max(1e-12)).count();
        prop_assert_eq!(num_rank, qp.rank());
    }

    #[test]
    fn bspline_partition_of_unity_random_inputs(
        seed in 0u64..1000,
        knots in 3usize..12,
        degree in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 30;
        let xs: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let (_, b) = bspline_basis(&xs, knots, degree).unwrap();
        for i in 0..m {
            let s: f64 = b.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }
}
