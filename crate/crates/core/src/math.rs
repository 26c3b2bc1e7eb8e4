//! Small numerical helpers shared across the crate: log-sum-exp, softmax and
//! a Cholesky-factored multivariate Gaussian.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

/// `log(sum(exp(xs)))` computed with the usual max shift.
///
/// Returns negative infinity for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Softmax of a score vector. Entries are strictly positive and sum to one
/// for finite scores.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A multivariate normal with fixed covariance, factored once so repeated
/// density evaluations only pay a triangular solve.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    lower: DMatrix<f64>,
    /// -0.5 * (d * ln(2π) + ln det Σ)
    log_norm: f64,
}

impl GaussianFactor {
    /// Cholesky-factor `sigma`. Fails if the matrix is not positive definite.
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows();
        if sigma.ncols() != d {
            return Err(Error::invalid("covariance must be square"));
        }
        let chol = nalgebra::Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::numerical("covariance is not positive definite"))?;
        let lower = chol.l();
        let log_det: f64 = (0..d).map(|i| lower[(i, i)].ln()).sum::<f64>() * 2.0;
        Ok(GaussianFactor {
            lower,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Log density of `x` under N(mean, Σ).
    pub fn logpdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let diff = x - mean;
        let y = self
            .lower
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }

    /// Draw `mean + L ξ` where ξ is a vector of standard normals.
    pub fn sample<R: rand::Rng>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        mean + &self.lower * xi
    }
}

/// True when every entry of the matrix is finite.
pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// True when every entry of the vector is finite.
pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|v| v.is_finite())
}
