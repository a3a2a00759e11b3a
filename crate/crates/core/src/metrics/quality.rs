use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ObeError, Result};

/// Feature map applied to image batches `[B, C, n, n]` before fitting Gaussians.
pub trait FeatureExtractor {
    fn features(&self, images: &ArrayD<f64>) -> Result<Array2<f64>>;
}

/// Raw pixels as features.
pub struct FlattenFeatures;

impl FeatureExtractor for FlattenFeatures {
    fn features(&self, images: &ArrayD<f64>) -> Result<Array2<f64>> {
        let b = images.shape().first().copied().unwrap_or(0);
        let flat = if b == 0 { 0 } else { images.len() / b };
        images
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b, flat))
            .map_err(|e| ObeError::shape(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetDistance {
    pub distance: f64,
    /// Set when a negative eigenvalue had to be zeroed to take a square root.
    pub clamped: bool,
}

/// Mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(ObeError::Metric(format!("a Gaussian fit needs at least 2 samples, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn to_matrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenvalues of a symmetric matrix with small negative ones set to 0.
fn clamped_eigen(m: DMatrix<f64>, clamped: &mut bool) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-10 * top.max(1.0) {
                *clamped = true;
            }
            *v = 0.0;
        }
    }
    eig
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
///
/// The trace term is taken as `tr (S1^{1/2} S2 S1^{1/2})^{1/2}`, which has the
/// same eigenvalues and stays symmetric.
pub fn frechet_distance(mu1: &Array1<f64>, s1: &Array2<f64>, mu2: &Array1<f64>, s2: &Array2<f64>) -> Result<FrechetDistance> {
    let d = mu1.len();
    if mu2.len() != d || s1.dim() != (d, d) || s2.dim() != (d, d) {
        return Err(ObeError::shape(format!(
            "moments disagree: {d}, {}, {:?}, {:?}",
            mu2.len(),
            s1.shape(),
            s2.shape()
        )));
    }
    let mut clamped = false;
    let e1 = clamped_eigen(to_matrix(s1), &mut clamped);
    let root1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let mut inner = &root1 * to_matrix(s2) * &root1;
    inner = (&inner + inner.transpose()) * 0.5;
    let e2 = clamped_eigen(inner, &mut clamped);
    let trace_root: f64 = e2.eigenvalues.iter().map(|v| v.sqrt()).sum();
    if clamped {
        log::warn!("frechet distance: covariance product was not positive semi-definite; negative eigenvalues set to 0");
    }
    let diff = mu1 - mu2;
    Ok(FrechetDistance {
        distance: diff.dot(&diff) + s1.diag().sum() + s2.diag().sum() - 2.0 * trace_root,
        clamped,
    })
}

/// Fréchet distance between Gaussian fits of extracted features of two image sets.
pub fn quality_score(real: &ArrayD<f64>, fake: &ArrayD<f64>, extractor: &dyn FeatureExtractor) -> Result<FrechetDistance> {
    let (m1, s1) = gaussian_fit(&extractor.features(real)?)?;
    let (m2, s2) = gaussian_fit(&extractor.features(fake)?)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}
