//! Ridge regression on standardized features with an unpenalized intercept.
//!
//! Features are centered and scaled by their training mean and population
//! standard deviation; the intercept is the training mean of `y`. The
//! weights solve `(ZᵀZ + λI) w = Zᵀ(y − ȳ)` by a direct Cholesky solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_solve, column_moments, standardize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RidgeError {
    #[error("need at least {needed} rows to fit {k} features, got {n}")]
    UnderDetermined { n: usize, k: usize, needed: usize },
    #[error("design has {x_rows} rows but target has {y_len}")]
    LengthMismatch { x_rows: usize, y_len: usize },
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("penalty must be finite and nonnegative, got {0}")]
    InvalidPenalty(f64),
    #[error("normal equations are singular; use a positive penalty")]
    RankDeficient,
    #[error("model expects {expected} features, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub train_means: Vec<f64>,
    pub train_stds: Vec<f64>,
    pub penalty: f64,
}

/// Fit a ridge forecaster. Requires at least `k + 1` rows.
pub fn fit_ridge(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty: f64,
) -> Result<RidgeModel, RidgeError> {
    let (n, k) = x.shape();
    if n < k + 1 {
        return Err(RidgeError::UnderDetermined {
            n,
            k,
            needed: k + 1,
        });
    }
    fit_penalized(x, y, penalty)
}

/// Same fit without the row-count requirement; well-posed whenever
/// `penalty > 0`. Used for the per-column imputation models.
pub(crate) fn fit_penalized(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty: f64,
) -> Result<RidgeModel, RidgeError> {
    let (n, k) = x.shape();
    if n != y.len() {
        return Err(RidgeError::LengthMismatch {
            x_rows: n,
            y_len: y.len(),
        });
    }
    if n == 0 {
        return Err(RidgeError::UnderDetermined { n, k, needed: 1 });
    }
    if !(penalty.is_finite() && penalty >= 0.0) {
        return Err(RidgeError::InvalidPenalty(penalty));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(RidgeError::NonFinite);
    }

    let (train_means, train_stds) = column_moments(x);
    let z = standardize(x, &train_means, &train_stds);
    let intercept = y.sum() / n as f64;
    let centered = y.add_scalar(-intercept);

    let mut gram = z.transpose() * &z;
    for i in 0..k {
        gram[(i, i)] += penalty;
    }
    let rhs = z.transpose() * centered;
    let weights = cholesky_solve(&gram, &rhs).ok_or(RidgeError::RankDeficient)?;

    Ok(RidgeModel {
        weights: weights.iter().copied().collect(),
        intercept,
        train_means,
        train_stds,
        penalty,
    })
}

pub fn predict_ridge(model: &RidgeModel, x: &DMatrix<f64>) -> Result<DVector<f64>, RidgeError> {
    model.predict(x)
}

impl RidgeModel {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>, RidgeError> {
        if x.ncols() != self.weights.len() {
            return Err(RidgeError::ShapeMismatch {
                expected: self.weights.len(),
                got: x.ncols(),
            });
        }
        Ok(DVector::from_iterator(
            x.nrows(),
            x.row_iter()
                .map(|row| self.predict_row(row.iter().copied())),
        ))
    }

    pub(crate) fn predict_row(&self, row: impl Iterator<Item = f64>) -> f64 {
        row.zip(&self.weights)
            .zip(self.train_means.iter().zip(&self.train_stds))
            .fold(self.intercept, |acc, ((v, w), (m, s))| {
                acc + (v - m) / s * w
            })
    }
}
