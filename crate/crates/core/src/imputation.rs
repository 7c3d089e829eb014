//! Chained-equation completion of a lake's covariate matrix.
//!
//! The matrix holds covariates only; the Secchi depth never enters it.
//! After a column-mean warm start, each sweep visits the columns with gaps
//! in ascending order of their original missingness, regresses the column's
//! observed rows on all other (current) columns with a small-penalty ridge
//! fit and overwrites the originally missing cells with the predictions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::dataset::LakeSeries;
use crate::models::ridge::{fit_penalized, RidgeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputeError {
    #[error("column `{0}` has no observed values")]
    EmptyColumn(String),
    #[error("matrix has no rows")]
    NoRows,
    #[error("schema has {names} names but matrix has {cols} columns")]
    SchemaMismatch { names: usize, cols: usize },
    #[error("non-finite observed value in column `{0}`")]
    NonFinite(String),
    #[error("invalid imputation config: {0}")]
    InvalidConfig(String),
    #[error("conditional model for column `{column}` failed: {source}")]
    Fit {
        column: String,
        #[source]
        source: RidgeError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeConfig {
    pub max_sweeps: usize,
    pub ridge_penalty: f64,
    /// Stop once the largest change of any imputed cell is at most this.
    pub convergence_tol: f64,
    /// Add seeded Gaussian noise with the fit's residual sd to predictions.
    pub add_noise: bool,
    pub seed: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 10,
            ridge_penalty: 1e-3,
            convergence_tol: 1e-6,
            add_noise: false,
            seed: 0,
        }
    }
}

impl ImputeConfig {
    fn validate(&self) -> Result<(), ImputeError> {
        if self.max_sweeps == 0 {
            return Err(ImputeError::InvalidConfig(
                "max_sweeps must be at least 1".into(),
            ));
        }
        if !(self.ridge_penalty.is_finite() && self.ridge_penalty >= 0.0) {
            return Err(ImputeError::InvalidConfig(
                "ridge_penalty must be nonnegative".into(),
            ));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(ImputeError::InvalidConfig(
                "convergence_tol must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Covariate matrix with explicit missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    pub values: DMatrix<Option<f64>>,
    pub feature_schema: Vec<String>,
}

impl CovariateMatrix {
    pub fn new(
        values: DMatrix<Option<f64>>,
        feature_schema: Vec<String>,
    ) -> Result<Self, ImputeError> {
        if values.ncols() != feature_schema.len() {
            return Err(ImputeError::SchemaMismatch {
                names: feature_schema.len(),
                cols: values.ncols(),
            });
        }
        Ok(Self {
            values,
            feature_schema,
        })
    }

    /// Covariates of every record in `series`, one row per record.
    pub fn from_series(series: &LakeSeries) -> Self {
        let values = DMatrix::from_fn(series.len(), series.n_features(), |i, j| {
            series.records[i].covariates[j]
        });
        Self {
            values,
            feature_schema: series.feature_schema.clone(),
        }
    }

    pub fn missing_count(&self, col: usize) -> usize {
        self.values
            .column(col)
            .iter()
            .filter(|v| v.is_none())
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedMatrix {
    pub values: DMatrix<f64>,
    pub feature_schema: Vec<String>,
    /// `true` exactly where the input cell was missing.
    pub imputed_mask: DMatrix<bool>,
}

impl CompletedMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    fn mask_count(&self, col: usize) -> usize {
        self.imputed_mask.column(col).iter().filter(|&&m| m).count()
    }

    /// Column indices with any imputed cell, ascending by the number of
    /// imputed cells (ties by position).
    pub fn visit_order(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = (0..self.ncols())
            .filter(|&j| self.mask_count(j) > 0)
            .collect();
        cols.sort_by_key(|&j| (self.mask_count(j), j));
        cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sweeps: usize,
    pub final_delta: f64,
    pub converged: bool,
    /// `(feature, cells filled)` in schema order.
    pub fill_counts: Vec<(String, usize)>,
}

/// Replace each missing cell by its column's observed mean.
pub fn initialize_fill(matrix: &CovariateMatrix) -> Result<CompletedMatrix, ImputeError> {
    let (n, p) = matrix.values.shape();
    if n == 0 {
        return Err(ImputeError::NoRows);
    }
    let mut values = DMatrix::zeros(n, p);
    let mask = matrix.values.map(|v| v.is_none());
    for j in 0..p {
        let name = &matrix.feature_schema[j];
        let col = matrix.values.column(j);
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        if observed.is_empty() {
            return Err(ImputeError::EmptyColumn(name.clone()));
        }
        if observed.iter().any(|v| !v.is_finite()) {
            return Err(ImputeError::NonFinite(name.clone()));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for i in 0..n {
            values[(i, j)] = col[i].unwrap_or(mean);
        }
    }
    Ok(CompletedMatrix {
        values,
        feature_schema: matrix.feature_schema.clone(),
        imputed_mask: mask,
    })
}

/// One chained-equation pass. Returns the updated matrix and the largest
/// absolute change of any imputed cell.
pub fn mice_sweep<R: Rng>(
    current: &CompletedMatrix,
    config: &ImputeConfig,
    rng: &mut R,
) -> Result<(CompletedMatrix, f64), ImputeError> {
    let mut next = current.clone();
    let n = next.nrows();
    let p = next.ncols();
    let mut max_delta = 0.0f64;

    for j in current.visit_order() {
        let observed: Vec<usize> = (0..n).filter(|&i| !next.imputed_mask[(i, j)]).collect();
        let missing: Vec<usize> = (0..n).filter(|&i| next.imputed_mask[(i, j)]).collect();
        let others: Vec<usize> = (0..p).filter(|&c| c != j).collect();

        let x_obs = DMatrix::from_fn(observed.len(), others.len(), |r, c| {
            next.values[(observed[r], others[c])]
        });
        let y_obs = DVector::from_fn(observed.len(), |r, _| next.values[(observed[r], j)]);
        let model = fit_penalized(&x_obs, &y_obs, config.ridge_penalty).map_err(|source| {
            ImputeError::Fit {
                column: next.feature_schema[j].clone(),
                source,
            }
        })?;

        let resid_sd = if config.add_noise {
            let fitted = model.predict(&x_obs).expect("shape checked");
            let sse: f64 = (&y_obs - fitted).iter().map(|r| r * r).sum();
            (sse / observed.len() as f64).sqrt()
        } else {
            0.0
        };

        for &i in &missing {
            let mut pred = model.predict_row(others.iter().map(|&c| next.values[(i, c)]));
            if config.add_noise {
                let z: f64 = StandardNormal.sample(rng);
                pred += resid_sd * z;
            }
            max_delta = max_delta.max((pred - next.values[(i, j)]).abs());
            next.values[(i, j)] = pred;
        }
    }
    Ok((next, max_delta))
}

/// Warm start followed by sweeps until the imputed cells stop moving or
/// `max_sweeps` is reached.
pub fn mice_impute(
    matrix: &CovariateMatrix,
    config: &ImputeConfig,
) -> Result<(CompletedMatrix, FitReport), ImputeError> {
    config.validate()?;
    let mut current = initialize_fill(matrix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sweeps = 0;
    let mut delta = 0.0;
    let mut converged = false;
    while sweeps < config.max_sweeps {
        let (next, d) = mice_sweep(&current, config, &mut rng)?;
        current = next;
        delta = d;
        sweeps += 1;
        debug!(sweeps, delta, "mice sweep");
        if delta <= config.convergence_tol {
            converged = true;
            break;
        }
    }
    let fill_counts = (0..current.ncols())
        .map(|j| (current.feature_schema[j].clone(), current.mask_count(j)))
        .collect();
    Ok((
        current,
        FitReport {
            sweeps,
            final_delta: delta,
            converged,
            fill_counts,
        },
    ))
}
