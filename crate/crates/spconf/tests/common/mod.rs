//! Independent numerical oracles for the integration suites. These
//! deliberately avoid the library's own linear-algebra paths: the
//! eigensolver is a classic cyclic Jacobi sweep and the GLM fitter is
//! iteratively reweighted least squares via Gaussian elimination.

#![allow(dead_code)]

use nalgebra::DMatrix;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues ascending, eigenvectors as columns).
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[(x, x)].partial_cmp(&m[(y, y)]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vecs[(k, dst)] = v[(k, src)];
        }
    }
    (vals, vecs)
}

/// Moore-Penrose pseudo-inverse through the Jacobi oracle.
pub fn pinv_oracle(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (vals, vecs) = jacobi_eigen(a);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        if vals[j].abs() <= rel_tol * vmax.max(1e-300) {
            continue;
        }
        let w = 1.0 / vals[j];
        for r in 0..n {
            for c in 0..n {
                out[(r, c)] += vecs[(r, j)] * w * vecs[(c, j)];
            }
        }
    }
    out
}

/// Solve a dense linear system by Gaussian elimination with partial
/// pivoting. Panics on a singular system (oracle use only).
pub fn gauss_solve(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[(r, col)].abs() > m[(piv, col)].abs() {
                piv = r;
            }
        }
        assert!(m[(piv, col)].abs() > 1e-300, "singular oracle system");
        if piv != col {
            m.swap_rows(piv, col);
            rhs.swap(piv, col);
        }
        for r in (col + 1)..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[(r, c)] -= f * m[(col, c)];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in (r + 1)..n {
            s -= m[(r, c)] * x[c];
        }
        x[r] = s / m[(r, r)];
    }
    x
}

/// Poisson GLM (log link, offset log e) maximum-likelihood fit by IRLS.
/// The design gets an intercept column prepended. Returns (coefficients,
/// standard errors) with coefficient 0 the intercept.
pub fn irls_poisson(
    y: &[f64],
    e: &[f64],
    x: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let p1 = x.ncols() + 1;
    let mut design = DMatrix::zeros(n, p1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..x.ncols() {
            design[(i, j + 1)] = x[(i, j)];
        }
    }
    let total_y: f64 = y.iter().sum();
    let total_e: f64 = e.iter().sum();
    let mut beta = vec![0.0; p1];
    beta[0] = (total_y.max(0.5) / total_e).ln();
    for _ in 0..100 {
        let mut eta = vec![0.0; n];
        for i in 0..n {
            for j in 0..p1 {
                eta[i] += design[(i, j)] * beta[j];
            }
        }
        let mu: Vec<f64> = eta.iter().zip(e).map(|(et, ei)| ei * et.exp()).collect();
        // Working response z = eta + (y - mu)/mu, weights mu.
        let mut xtwx = DMatrix::zeros(p1, p1);
        let mut xtwz = vec![0.0; p1];
        for i in 0..n {
            let w = mu[i];
            let z = eta[i] + (y[i] - mu[i]) / mu[i];
            for a in 0..p1 {
                xtwz[a] += design[(i, a)] * w * z;
                for b in 0..p1 {
                    xtwx[(a, b)] += design[(i, a)] * w * design[(i, b)];
                }
            }
        }
        let new_beta = gauss_solve(&xtwx, &xtwz);
        let delta: f64 = new_beta
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = new_beta;
        if delta < 1e-12 {
            break;
        }
    }
    // Standard errors from the inverse Fisher information.
    let mut eta = vec![0.0; n];
    for i in 0..n {
        for j in 0..p1 {
            eta[i] += design[(i, j)] * beta[j];
        }
    }
    let mut xtwx = DMatrix::zeros(p1, p1);
    for i in 0..n {
        let w = e[i] * eta[i].exp();
        for a in 0..p1 {
            for b in 0..p1 {
                xtwx[(a, b)] += design[(i, a)] * w * design[(i, b)];
            }
        }
    }
    let mut se = vec![0.0; p1];
    for j in 0..p1 {
        let mut unit = vec![0.0; p1];
        unit[j] = 1.0;
        let col = gauss_solve(&xtwx, &unit);
        se[j] = col[j].sqrt();
    }
    (beta, se)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}
