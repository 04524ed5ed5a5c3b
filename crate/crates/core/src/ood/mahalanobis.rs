use nalgebra::{DMatrix, DVector};

use super::EmbeddingBank;
use crate::error::{Error, Result};

/// Class means with one shared covariance; stores its Cholesky factor.
#[derive(Clone, Debug)]
pub struct MahalanobisModel {
    means: Vec<DVector<f64>>,
    sigma: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl MahalanobisModel {
    /// Class means and pooled within-class covariance of the bank, plus
    /// `shrinkage * I`.
    pub fn fit(bank: &EmbeddingBank, num_classes: usize, shrinkage: f64) -> Result<Self> {
        if !(shrinkage >= 0.0 && shrinkage.is_finite()) {
            return Err(Error::InvalidArgument(format!("shrinkage {shrinkage}")));
        }
        let d = bank.dim();
        let mut sums = vec![DVector::<f64>::zeros(d); num_classes];
        let mut counts = vec![0usize; num_classes];
        for (row, &l) in bank.rows().zip(bank.labels()) {
            let c = l as usize;
            if c >= num_classes {
                return Err(Error::InvalidArgument(format!("bank label {c} is not an ID class")));
            }
            sums[c] += DVector::from_column_slice(row);
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} bank vectors, need at least 2",
                counts[c]
            )));
        }
        let means: Vec<DVector<f64>> = sums.into_iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for (row, &l) in bank.rows().zip(bank.labels()) {
            let r = DVector::from_column_slice(row) - &means[l as usize];
            sigma.ger(1.0, &r, &r, 1.0);
        }
        sigma /= bank.len() as f64;
        for i in 0..d {
            sigma[(i, i)] += shrinkage;
        }
        Self::from_parts_with(means, sigma, shrinkage)
    }

    /// Means and covariance taken as given.
    pub fn from_parts(means: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        let d = sigma.len();
        if means.is_empty() || means.iter().any(|m| m.len() != d) || sigma.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("means and covariance disagree in dimension".into()));
        }
        let means = means.into_iter().map(DVector::from_vec).collect();
        let sigma = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        Self::from_parts_with(means, sigma, 0.0)
    }

    fn from_parts_with(means: Vec<DVector<f64>>, sigma: DMatrix<f64>, shrinkage: f64) -> Result<Self> {
        let chol = sigma.clone().cholesky().ok_or(Error::SingularCovariance { shrinkage })?;
        Ok(Self { means, sigma, chol })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `(z - mu_c)^T Sigma^-1 (z - mu_c)`.
    pub fn distance(&self, z: &[f64], class: usize) -> f64 {
        let r = DVector::from_column_slice(z) - &self.means[class];
        let w = self.chol.solve(&r);
        r.dot(&w)
    }

    /// `-min_c D_M(z, mu_c)`.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "mahalanobis query",
                expected: self.dim(),
                found: z.len(),
            });
        }
        let best = (0..self.means.len())
            .map(|c| self.distance(z, c))
            .fold(f64::INFINITY, f64::min);
        Ok(-best)
    }
}
