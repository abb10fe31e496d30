//! B-spline marginal bases, row-wise tensor-product spatial bases, and
//! anisotropic second-order difference penalties.
//!
//! Knots are placed equidistantly over the data range: `n_internal_knots`
//! fenceposts spanning `[min, max]` inclusive, extended by `degree` extra
//! knots on each side with the same spacing. With 11 internal knots and a
//! cubic basis this yields 13 basis functions per coordinate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{kronecker, row_kronecker, sym_eigen_sorted};

/// One marginal B-spline basis: extended knot vector, degree, and the
/// evaluation domain.
#[derive(Debug, Clone)]
pub struct MarginalBasis {
    pub knots: Vec<f64>,
    pub degree: usize,
    pub n_basis: usize,
    pub domain: (f64, f64),
}

impl MarginalBasis {
    /// Equidistant basis over `[lo, hi]` with `n_internal_knots` fenceposts
    /// (boundary knots included).
    pub fn uniform(lo: f64, hi: f64, n_internal_knots: usize, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::validation("spline degree must be at least 1"));
        }
        if n_internal_knots < 2 {
            return Err(Error::validation(
                "need at least 2 internal knots to span the domain",
            ));
        }
        if !(hi > lo) {
            return Err(Error::validation(
                "zero-width domain: evaluation coordinate is constant",
            ));
        }
        let segments = n_internal_knots - 1;
        let h = (hi - lo) / segments as f64;
        let mut knots = Vec::with_capacity(n_internal_knots + 2 * degree);
        for i in 0..(n_internal_knots + 2 * degree) {
            knots.push(lo + (i as f64 - degree as f64) * h);
        }
        let n_basis = n_internal_knots + degree - 1;
        debug_assert_eq!(n_basis, knots.len() - degree - 1);
        Ok(MarginalBasis {
            knots,
            degree,
            n_basis,
            domain: (lo, hi),
        })
    }

    /// Evaluate the basis at the given points by the Cox–de Boor recursion.
    /// Rows sum to one on the domain; points are clamped to the domain.
    pub fn evaluate(&self, xs: &[f64]) -> DMatrix<f64> {
        let d = self.degree;
        let mut out = DMatrix::zeros(xs.len(), self.n_basis);
        for (row, &x_raw) in xs.iter().enumerate() {
            let x = x_raw.clamp(self.domain.0, self.domain.1);
            // Knot span index: largest j with knots[j] <= x, capped so that
            // the right boundary lands in the final non-empty span.
            let mut span = d;
            while span + 1 < self.knots.len() - d - 1 && x >= self.knots[span + 1] {
                span += 1;
            }
            // Triangular Cox–de Boor scheme over the d+1 active functions.
            let mut vals = vec![0.0f64; d + 1];
            vals[0] = 1.0;
            for level in 1..=d {
                let mut saved = 0.0;
                for r in 0..level {
                    let left = self.knots[span + 1 + r - level];
                    let right = self.knots[span + 1 + r];
                    let alpha = if right != left {
                        vals[r] / (right - left)
                    } else {
                        0.0
                    };
                    vals[r] = saved + (right - x) * alpha;
                    saved = (x - left) * alpha;
                }
                vals[level] = saved;
            }
            for (r, &v) in vals.iter().enumerate() {
                out[(row, span - d + r)] = v;
            }
        }
        out
    }
}

/// Build a marginal basis on the data range and evaluate it.
pub fn bspline_basis(
    xs: &[f64],
    n_internal_knots: usize,
    degree: usize,
) -> Result<(MarginalBasis, DMatrix<f64>)> {
    if xs.is_empty() {
        return Err(Error::validation("cannot build a basis on no points"));
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let basis = MarginalBasis::uniform(lo, hi, n_internal_knots, degree)?;
    let b = basis.evaluate(xs);
    Ok((basis, b))
}

/// Row-wise tensor product of two marginal bases: column `j1*k2 + j2` pairs
/// basis function `j1` of the first coordinate with `j2` of the second.
#[derive(Debug, Clone)]
pub struct TensorBasis {
    pub b: DMatrix<f64>,
    pub k1: usize,
    pub k2: usize,
    pub marginal_1: MarginalBasis,
    pub marginal_2: MarginalBasis,
}

pub fn tensor_basis(
    m1: &MarginalBasis,
    b1: &DMatrix<f64>,
    m2: &MarginalBasis,
    b2: &DMatrix<f64>,
) -> Result<TensorBasis> {
    let b = row_kronecker(b1, b2)?;
    Ok(TensorBasis {
        b,
        k1: b1.ncols(),
        k2: b2.ncols(),
        marginal_1: m1.clone(),
        marginal_2: m2.clone(),
    })
}

/// Convenience constructor: tensor basis over scattered (s1, s2) points with
/// the same fencepost count and degree in both coordinates.
pub fn tensor_basis_at(
    s1: &[f64],
    s2: &[f64],
    n_internal_knots: usize,
    degree: usize,
) -> Result<TensorBasis> {
    let (m1, b1) = bspline_basis(s1, n_internal_knots, degree)?;
    let (m2, b2) = bspline_basis(s2, n_internal_knots, degree)?;
    tensor_basis(&m1, &b1, &m2, &b2)
}

/// Second-order difference matrix for `k` coefficients: (k-2) x k rows of
/// (1, -2, 1).
pub fn second_difference(k: usize) -> Result<DMatrix<f64>> {
    if k < 3 {
        return Err(Error::validation(
            "order-2 differences need at least 3 coefficients",
        ));
    }
    let mut d = DMatrix::zeros(k - 2, k);
    for r in 0..k - 2 {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    Ok(d)
}

/// Anisotropic tensor-product penalty
/// `P = lambda1 (D1'D1 ⊗ I_{k2}) + lambda2 (I_{k1} ⊗ D2'D2)`,
/// where `D1` differences the first-coordinate index (slow, k1) and `D2` the
/// second-coordinate index (fast, k2), matching the column layout of
/// [`TensorBasis`]. `lambda1` therefore smooths along the first coordinate
/// and `lambda2` along the second. The null space has dimension 4 whenever
/// both weights are positive.
#[derive(Debug, Clone)]
pub struct TensorPenalty {
    pub p: DMatrix<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub k1: usize,
    pub k2: usize,
}

impl TensorPenalty {
    pub fn dim(&self) -> usize {
        self.k1 * self.k2
    }

    /// Marginal penalty factors: `S = D1'D1` (k1) and `T = D2'D2` (k2).
    /// `P = lambda1 (S ⊗ I) + lambda2 (I ⊗ T)` and the two Kronecker terms
    /// commute, so the eigenvalues of `P` are `lambda1 s_i + lambda2 t_j`.
    pub fn marginal_factors(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            self.d1.transpose() * &self.d1,
            self.d2.transpose() * &self.d2,
        )
    }
}

pub fn tensor_penalty(k1: usize, k2: usize, lambda1: f64, lambda2: f64) -> Result<TensorPenalty> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::validation("smoothing weights must be nonnegative"));
    }
    let d1 = second_difference(k1)?;
    let d2 = second_difference(k2)?;
    let s = d1.transpose() * &d1;
    let t = d2.transpose() * &d2;
    let p = kronecker(&s, &DMatrix::identity(k2, k2)) * lambda1
        + kronecker(&DMatrix::identity(k1, k1), &t) * lambda2;
    Ok(TensorPenalty {
        p,
        lambda1,
        lambda2,
        d1,
        d2,
        k1,
        k2,
    })
}

const NULL_EIGENVALUE_REL: f64 = 1e-9;

/// Draw coefficients from the singular Gaussian with precision `P`:
/// independent normals with variance `1/lambda_j` on the non-null
/// eigendirections, exactly zero on the null space.
pub fn sample_penalized_coefficients<R: Rng>(
    pen: &TensorPenalty,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(pen.lambda1 > 0.0) || !(pen.lambda2 > 0.0) {
        return Err(Error::validation(
            "penalty is improper in some direction: both weights must be positive",
        ));
    }
    let (vals, vecs) = sym_eigen_sorted(&pen.p);
    let lambda_max = vals.last().copied().unwrap_or(0.0).max(0.0);
    let thresh = NULL_EIGENVALUE_REL * lambda_max;
    let m = pen.dim();
    let mut theta = DVector::zeros(m);
    for j in 0..m {
        if vals[j] < thresh {
            continue;
        }
        let z: f64 = StandardNormal.sample(rng);
        let scale = 1.0 / vals[j].sqrt();
        for i in 0..m {
            theta[i] += vecs[(i, j)] * z * scale;
        }
    }
    Ok(theta)
}
