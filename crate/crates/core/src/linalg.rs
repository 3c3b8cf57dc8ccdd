//! Shared numerical helpers: jittered Cholesky, compensated summation,
//! symmetric eigendecompositions for repeated (sigma2, tau2) solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter added to a diagonal once when a Cholesky factorization fails.
pub const CHOL_JITTER: f64 = 1e-8;

/// Cholesky with the jitter-then-fail contract: on failure, add `jitter` to
/// the diagonal once and retry; a second failure is an error.
pub fn chol_with_jitter(
    mat: DMatrix<f64>,
    jitter: f64,
    context: &str,
) -> Result<Cholesky<f64, Dyn>> {
    match mat.clone().cholesky() {
        Some(ch) => Ok(ch),
        None => {
            let n = mat.nrows();
            let jittered = mat + DMatrix::identity(n, n) * jitter;
            jittered.cholesky().ok_or_else(|| Error::CholeskyFailed {
                context: context.to_string(),
                jitter,
            })
        }
    }
}

/// Neumaier compensated accumulator.
///
/// Keeps the running sum accurate to roughly double-double precision, so the
/// rounded result is independent of association for the summand sets used
/// here. Sketch application and federated aggregation both go through this,
/// which keeps the two-path identity at the ulp level.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated dot product of two equal-length slices.
pub fn neumaier_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = NeumaierSum::new();
    for (x, y) in a.iter().zip(b.iter()) {
        acc.add(x * y);
    }
    acc.total()
}

/// Eigendecomposition of a symmetric PSD matrix with eigenvalues clamped at
/// zero. Used to turn `sigma2 * M + tau2 * I` into a diagonal family:
/// repeated solves and log-determinants then cost O(m^2) instead of O(m^3).
pub struct PsdEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl PsdEigen {
    pub fn new(mat: &DMatrix<f64>) -> Self {
        let eig = mat.clone().symmetric_eigen();
        let values = eig.eigenvalues.map(|l| l.max(0.0));
        PsdEigen {
            vectors: eig.eigenvectors,
            values,
        }
    }

    /// Rotates columns into the eigenbasis: `Q^T rhs`.
    pub fn rotate(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.vectors.transpose() * rhs
    }

    pub fn rotate_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.vectors.transpose() * rhs
    }
}

/// Draws from N(mean, precision^{-1}) given the precision matrix.
pub fn sample_gaussian_from_precision(
    precision: DMatrix<f64>,
    unscaled_mean_rhs: &DVector<f64>,
    noise: &DVector<f64>,
    context: &str,
) -> Result<DVector<f64>> {
    let chol = chol_with_jitter(precision, CHOL_JITTER, context)?;
    let mean = chol.solve(unscaled_mean_rhs);
    // x = mean + L^{-T} z has covariance (L L^T)^{-1}
    let l_t = chol.l().transpose();
    let perturb = l_t
        .solve_upper_triangular(noise)
        .expect("triangular factor from a successful Cholesky is invertible");
    Ok(mean + perturb)
}
