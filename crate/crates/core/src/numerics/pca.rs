// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal component analysis on top of a cyclic Jacobi eigensolver.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in nonincreasing order and the matching eigenvectors
/// as columns. Sweeps stop once the off-diagonal Frobenius norm falls below
/// `1e-10` times the matrix norm.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "symmetric_eigen needs a square matrix");
    let mut a = matrix.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
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
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Mean, orthonormal principal directions and their variances.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// `d × r`, orthonormal columns.
    pub components: DMatrix<f64>,
    /// Nonincreasing, nonnegative.
    pub explained_variance: Vec<f64>,
    /// Total variance of the centered data (trace of the covariance).
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn rank(&self) -> usize {
        self.components.ncols()
    }

    /// `μ + QQᵀ(x − μ)`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let centered = x - &self.mean;
        let coords = self.components.tr_mul(&centered);
        &self.mean + &self.components * coords
    }

    /// `(I − QQᵀ) v`, the part of `v` orthogonal to the component span.
    pub fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        let coords = self.components.tr_mul(v);
        v - &self.components * coords
    }

    /// Keep the leading components up to the first that explains at least
    /// `threshold` of the total variance. Zero-variance data keeps none.
    pub fn truncate_to_variance(&self, threshold: f64) -> PcaBasis {
        let mut keep = 0;
        if self.total_variance > 0.0 {
            let mut acc = 0.0;
            for &ev in &self.explained_variance {
                if acc >= threshold * self.total_variance {
                    break;
                }
                if ev <= 0.0 {
                    break;
                }
                acc += ev;
                keep += 1;
            }
        }
        self.truncate(keep)
    }

    pub fn truncate(&self, rank: usize) -> PcaBasis {
        let keep = rank.min(self.rank());
        PcaBasis {
            mean: self.mean.clone(),
            components: self.components.columns(0, keep).into_owned(),
            explained_variance: self.explained_variance[..keep].to_vec(),
            total_variance: self.total_variance,
        }
    }
}

/// Sample covariance (`1/(n−1)`) of the rows of `points` about `mean`.
fn covariance(points: &[DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in points {
        let c = p - mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    if points.len() > 1 {
        cov /= (points.len() - 1) as f64;
    }
    cov
}

/// Rank-`rank` PCA of a point set.
///
/// Keeps `min(rank, d, n − 1)` components. Directions with (numerically)
/// zero variance are still returned when requested; they carry zero
/// explained variance.
pub fn pca(points: &[DVector<f64>], rank: usize) -> Result<PcaBasis> {
    let first = points.first().ok_or(Error::EmptyInput("pca points"))?;
    let d = first.len();
    for p in points {
        check_dim(d, p.len(), "pca point")?;
    }
    let n = points.len();
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n as f64;
    let cov = covariance(points, &mean);
    let total_variance = cov.trace();
    let keep = rank.min(d).min(n - 1);
    let (values, vectors) = symmetric_eigen(&cov);
    Ok(PcaBasis {
        mean,
        components: vectors.columns(0, keep).into_owned(),
        explained_variance: values.iter().take(keep).map(|v| v.max(0.0)).collect(),
        total_variance,
    })
}
