//! Small dense-linear-algebra and summary-statistic helpers shared across
//! the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

/// Population standard deviation (n denominator).
pub fn population_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / xs.len() as f64).sqrt()
}

/// Center to zero mean and scale to unit sample variance, in place.
///
/// Errors when the input is (numerically) constant.
pub fn standardize(xs: &mut [f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::validation("standardize needs at least 2 values"));
    }
    let m = mean(xs);
    let sd = sample_sd(xs);
    if !(sd > 0.0) || sd < 1e-12 * (1.0 + m.abs()) {
        return Err(Error::validation(
            "cannot standardize a constant column (zero variance)",
        ));
    }
    for x in xs.iter_mut() {
        *x = (*x - m) / sd;
    }
    Ok((m, sd))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Type-7 (linear interpolation) quantile of an unsorted slice.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    quantile_sorted(&s, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = (idx.ceil() as usize).min(sorted.len() - 1);
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending and a
/// deterministic sign convention (first entry of visible magnitude in each
/// eigenvector is positive).
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let se = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[a]
            .partial_cmp(&se.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = Vec::with_capacity(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vals.push(se.eigenvalues[src]);
        let mut col: DVector<f64> = se.eigenvectors.column(src).into();
        fix_sign(col.as_mut_slice());
        vecs.set_column(dst, &col);
    }
    (vals, vecs)
}

/// Flip the vector so its first entry of non-negligible magnitude is positive.
pub fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if max == 0.0 {
        return;
    }
    for &x in v.iter() {
        if x.abs() > 1e-12 * max {
            if x < 0.0 {
                for y in v.iter_mut() {
                    *y = -*y;
                }
            }
            return;
        }
    }
}

/// Solve the symmetric positive-definite system `a x = b` via Cholesky.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .cholesky()
        .map(|ch| ch.solve(b))
        .ok_or_else(|| Error::numeric("matrix is not positive definite"))
}

/// Row-wise Kronecker product: row i of the result is kron(row i of a, row i of b).
pub fn row_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::validation(format!(
            "row-wise Kronecker product needs equal row counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (n, ka, kb) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(n, ka * kb);
    for i in 0..n {
        for ja in 0..ka {
            let av = a[(i, ja)];
            for jb in 0..kb {
                out[(i, ja * kb + jb)] = av * b[(i, jb)];
            }
        }
    }
    Ok(out)
}

/// Kronecker product of two dense matrices.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = (a.nrows(), a.ncols());
    let (rb, cb) = (b.nrows(), b.ncols());
    let mut out = DMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let av = a[(i, j)];
            if av == 0.0 {
                continue;
            }
            for p in 0..rb {
                for q in 0..cb {
                    out[(i * rb + p, j * cb + q)] = av * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Deterministic seed mixing for derived generators (splitmix64 step).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
