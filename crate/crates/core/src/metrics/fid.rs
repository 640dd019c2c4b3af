use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

const EIGEN_FLOOR: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-8;

/// Gaussian moments of a feature population.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    count: usize,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "covariance is {:?} for a {d}-dimensional mean",
                covariance.shape()
            )));
        }
        if count < 2 {
            return Err(Error::Metric(format!("feature statistics need at least 2 samples, got {count}")));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Metric("feature statistics contain non-finite values".into()));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::Metric(format!("covariance is not symmetric (max deviation {asym:e})")));
        }
        Ok(Self {
            mean,
            covariance,
            count,
        })
    }

    /// Sample mean and unbiased covariance of `rows`, one feature vector each.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Metric(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature vectors have different lengths".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Eigenvalues of a symmetric matrix with tiny values floored to zero;
/// clearly negative ones are an error.
fn clamped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::Metric(format!("{what} is not positive semi-definite (eigenvalue {v:e})")));
        }
        if *v < EIGEN_FLOOR {
            *v = 0.0;
        }
    }
    Ok((values, eig.eigenvectors))
}

/// Fréchet distance between two Gaussians:
/// `|mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^(1/2))`.
///
/// The trace of the cross term is taken as `tr((A S_g A)^(1/2))` with
/// `A = S_r^(1/2)`, which is symmetric and has the same eigenvalues.
pub fn fid(real: &FeatureStats, generated: &FeatureStats) -> Result<f64> {
    if real.dim() != generated.dim() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            real.dim(),
            generated.dim()
        )));
    }
    let (values, vectors) = clamped_eigenvalues(&real.covariance, "real covariance")?;
    let sqrt_r = &vectors * DMatrix::from_diagonal(&values.map(f64::sqrt)) * vectors.transpose();
    let inner = &sqrt_r * &generated.covariance * &sqrt_r;
    let (cross, _) = clamped_eigenvalues(&inner, "covariance product")?;
    let tr_cross: f64 = cross.iter().map(|v| v.sqrt()).sum();
    let diff = (&real.mean - &generated.mean).norm_squared();
    let d = diff + real.covariance.trace() + generated.covariance.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> FeatureStats {
        let d = mean.len();
        FeatureStats::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov), 10).unwrap()
    }

    #[test]
    fn scalar_closed_form() {
        let a = stats(&[0.0], &[1.0]);
        let b = stats(&[1.0], &[1.0]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-8);
        let c = stats(&[2.0], &[4.0]);
        // (0 - 2)^2 + (1 - 2)^2
        assert!((fid(&a, &c).unwrap() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn diagonal_case_decomposes_per_dimension() {
        let (m1, v1): ([f64; 3], [f64; 3]) = ([0.5, -1.0, 2.0], [1.5, 0.2, 3.0]);
        let (m2, v2): ([f64; 3], [f64; 3]) = ([0.0, 1.0, 2.5], [0.7, 0.9, 3.0]);
        let diag = |v: &[f64; 3]| {
            let mut m = vec![0.0; 9];
            for i in 0..3 {
                m[i * 4] = v[i];
            }
            m
        };
        let expected: f64 = (0..3).map(|i| (m1[i] - m2[i]).powi(2) + (v1[i].sqrt() - v2[i].sqrt()).powi(2)).sum();
        let got = fid(&stats(&m1, &diag(&v1)), &stats(&m2, &diag(&v2))).unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn identical_and_symmetric() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.1]).collect();
        let a = FeatureStats::from_features(&rows).unwrap();
        let b = FeatureStats::from_features(&rows[3..]).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
        let asym = FeatureStats::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]), 3);
        assert!(matches!(asym, Err(Error::Metric(_))));
        let neg = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -2.0]);
        assert!(matches!(fid(&neg, &neg), Err(Error::Metric(_))));
        let other = stats(&[0.0], &[1.0]);
        assert!(matches!(fid(&neg, &other), Err(Error::Shape(_))));
    }
}
