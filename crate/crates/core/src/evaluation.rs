//! Forecast metrics and the backward-expanding training protocol.
//!
//! A lake is evaluated on a fixed, most-recent test block. Training always
//! uses the `n` pre-test rows closest to that block; `n` grows backwards in
//! time from the smallest fittable size up to the whole pre-test pool.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitSeries;
use crate::imputation::CompletedMatrix;
use crate::models::ridge::{fit_ridge, RidgeError, RidgeModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("metric needs at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("observed and predicted lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("normalizer (mean observed value) must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("observed values have zero variance")]
    ZeroVariance,
    #[error("training size {n} outside [{min}, {max}]")]
    SizeOutOfRange { n: usize, min: usize, max: usize },
    #[error("no features selected")]
    NoFeatures,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("completed matrix does not align with the split: {0}")]
    Misaligned(String),
    #[error("only {available} complete training rows, need {needed}")]
    TooFewCompleteRows { available: usize, needed: usize },
    #[error("no complete test rows")]
    NoCompleteTestRows,
    #[error("pre-test pool of {n_pre} rows is smaller than the minimum training size {n_min}")]
    InsufficientPreTest { n_pre: usize, n_min: usize },
    #[error("grid stride must be positive")]
    ZeroStride,
    #[error(transparent)]
    Ridge(#[from] RidgeError),
}

fn check_pair(y: &[f64], y_hat: &[f64], needed: usize) -> Result<(), EvalError> {
    if y.len() != y_hat.len() {
        return Err(EvalError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.len() < needed {
        return Err(EvalError::TooShort {
            needed,
            got: y.len(),
        });
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, y_hat, 1)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// MAE divided by the mean observed value.
pub fn nmae(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    let err = mae(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if !(mean > 0.0) {
        return Err(EvalError::NonPositiveMean(mean));
    }
    Ok(err / mean)
}

/// `1 − SSE/SST` with SST taken about the mean of `y` itself.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, y_hat, 2)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    pub nmae: f64,
    /// `None` when the evaluated block has fewer than two rows or no spread.
    pub r2: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub test_mean_sdd: f64,
}

impl EvalMetrics {
    pub fn compute(y: &[f64], y_hat: &[f64], n_train: usize) -> Result<Self, EvalError> {
        Ok(Self {
            mae: mae(y, y_hat)?,
            nmae: nmae(y, y_hat)?,
            r2: r_squared(y, y_hat).ok(),
            n_train,
            n_test: y.len(),
            test_mean_sdd: y.iter().sum::<f64>() / y.len() as f64,
        })
    }
}

/// Dense training pool and test block of one lake, built from a split and
/// the completed covariates of the series the split came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFrame {
    pub lake_id: u32,
    pub feature_schema: Vec<String>,
    pub x_pre: DMatrix<f64>,
    pub y_pre: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
}

impl ForecastFrame {
    pub fn new(split: &SplitSeries, completed: &CompletedMatrix) -> Result<Self, EvalError> {
        if completed.feature_schema != split.pre.feature_schema {
            return Err(EvalError::Misaligned("feature schemas differ".into()));
        }
        let rows = completed.nrows();
        if let Some(&bad) = split
            .pre_rows
            .iter()
            .chain(&split.test_rows)
            .find(|&&r| r >= rows)
        {
            return Err(EvalError::Misaligned(format!(
                "row {bad} beyond completed matrix of {rows} rows"
            )));
        }
        let p = completed.ncols();
        let take =
            |idx: &[usize]| DMatrix::from_fn(idx.len(), p, |i, j| completed.values[(idx[i], j)]);
        let target = |s: &crate::dataset::LakeSeries| {
            DVector::from_iterator(
                s.len(),
                s.records
                    .iter()
                    .map(|r| r.sdd.expect("split rows carry SDD")),
            )
        };
        Ok(Self {
            lake_id: split.pre.lake_id,
            feature_schema: completed.feature_schema.clone(),
            x_pre: take(&split.pre_rows),
            y_pre: target(&split.pre),
            x_test: take(&split.test_rows),
            y_test: target(&split.test),
        })
    }

    pub fn n_pre(&self) -> usize {
        self.x_pre.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.feature_schema.len()
    }

    pub fn feature_indices(&self, names: &[String]) -> Result<Vec<usize>, EvalError> {
        names
            .iter()
            .map(|name| {
                self.feature_schema
                    .iter()
                    .position(|f| f == name)
                    .ok_or_else(|| EvalError::UnknownFeature(name.clone()))
            })
            .collect()
    }

    /// Fit on the last `n` pre-test rows using `cols`.
    pub fn fit_recent(
        &self,
        n: usize,
        cols: &[usize],
        penalty: f64,
    ) -> Result<RidgeModel, EvalError> {
        let k = cols.len();
        if k == 0 {
            return Err(EvalError::NoFeatures);
        }
        if n < k + 1 || n > self.n_pre() {
            return Err(EvalError::SizeOutOfRange {
                n,
                min: k + 1,
                max: self.n_pre(),
            });
        }
        let start = self.n_pre() - n;
        let x = DMatrix::from_fn(n, k, |i, j| self.x_pre[(start + i, cols[j])]);
        let y = self.y_pre.rows(start, n).into_owned();
        Ok(fit_ridge(&x, &y, penalty)?)
    }

    fn predict_block(&self, model: &RidgeModel, x: &DMatrix<f64>, cols: &[usize]) -> Vec<f64> {
        x.row_iter()
            .map(|row| model.predict_row(cols.iter().map(|&c| row[c])))
            .collect()
    }

    /// Test-block metrics of a ridge fit on the last `n` pre-test rows.
    pub fn eval_columns(
        &self,
        n: usize,
        cols: &[usize],
        penalty: f64,
    ) -> Result<EvalMetrics, EvalError> {
        let model = self.fit_recent(n, cols, penalty)?;
        let pred = self.predict_block(&model, &self.x_test, cols);
        EvalMetrics::compute(self.y_test.as_slice(), &pred, n)
    }

    /// Full-pool, full-feature model with its in-sample and test metrics.
    pub fn reference_fit(&self, penalty: f64) -> Result<ReferenceFit, EvalError> {
        let cols: Vec<usize> = (0..self.n_features()).collect();
        let n = self.n_pre();
        let model = self.fit_recent(n, &cols, penalty)?;
        let train_pred = self.predict_block(&model, &self.x_pre, &cols);
        let test_pred = self.predict_block(&model, &self.x_test, &cols);
        Ok(ReferenceFit {
            train: EvalMetrics::compute(self.y_pre.as_slice(), &train_pred, n)?,
            test: EvalMetrics::compute(self.y_test.as_slice(), &test_pred, n)?,
            model,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFit {
    pub model: RidgeModel,
    /// In-sample metrics on the pre-test pool.
    pub train: EvalMetrics,
    pub test: EvalMetrics,
}

/// Train on the `n` most recent pre-test rows restricted to `features` and
/// score the whole test block.
pub fn backward_eval(
    frame: &ForecastFrame,
    n: usize,
    features: &[String],
    penalty: f64,
) -> Result<EvalMetrics, EvalError> {
    let cols = frame.feature_indices(features)?;
    frame.eval_columns(n, &cols, penalty)
}

/// Training sizes `n_min, n_min + stride, …`, always ending at `N_pre`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Defaults to `p + 2`.
    pub n_min: Option<usize>,
    pub stride: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_min: None,
            stride: 1,
        }
    }
}

impl GridSpec {
    pub fn sizes(&self, n_pre: usize, p: usize) -> Result<Vec<usize>, EvalError> {
        if self.stride == 0 {
            return Err(EvalError::ZeroStride);
        }
        let n_min = self.n_min.unwrap_or(p + 2).max(1);
        if n_min > n_pre {
            return Err(EvalError::InsufficientPreTest { n_pre, n_min });
        }
        let mut sizes: Vec<usize> = (n_min..=n_pre).step_by(self.stride).collect();
        if sizes.last() != Some(&n_pre) {
            sizes.push(n_pre);
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub nmae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCurve {
    pub points: Vec<CurvePoint>,
    /// nMAE with the whole pre-test pool (the last grid point).
    pub reference_nmae: f64,
    pub n_star: Option<usize>,
    pub tolerance: f64,
}

/// Smallest grid size whose nMAE is within `(1 + tolerance)` of `reference`.
pub fn minimal_sample_count(
    points: &[CurvePoint],
    reference: f64,
    tolerance: f64,
) -> Option<usize> {
    let threshold = (1.0 + tolerance) * reference;
    points.iter().find(|p| p.nmae <= threshold).map(|p| p.n)
}

impl SampleCurve {
    pub fn from_points(points: Vec<CurvePoint>, tolerance: f64) -> Self {
        let reference_nmae = points.last().map_or(f64::NAN, |p| p.nmae);
        let n_star = minimal_sample_count(&points, reference_nmae, tolerance);
        Self {
            points,
            reference_nmae,
            n_star,
            tolerance,
        }
    }

    pub fn rethreshold(&self, tolerance: f64) -> Self {
        Self::from_points(self.points.clone(), tolerance)
    }

    pub fn nmae_at(&self, n: usize) -> Option<f64> {
        self.points.iter().find(|p| p.n == n).map(|p| p.nmae)
    }
}

/// Full-feature learning curve over the grid and its minimal sample count.
pub fn sample_curve(
    frame: &ForecastFrame,
    grid: &GridSpec,
    tolerance: f64,
    penalty: f64,
) -> Result<SampleCurve, EvalError> {
    let cols: Vec<usize> = (0..frame.n_features()).collect();
    let sizes = grid.sizes(frame.n_pre(), cols.len())?;
    let points = sizes
        .par_iter()
        .map(|&n| {
            frame
                .eval_columns(n, &cols, penalty)
                .map(|m| CurvePoint { n, nmae: m.nmae })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleCurve::from_points(points, tolerance))
}

/// Same protocol without imputation: within the last `n` pre-test rows and
/// the test block, rows missing any selected covariate are deleted.
pub fn complete_case_eval(
    split: &SplitSeries,
    n: usize,
    features: &[String],
    penalty: f64,
) -> Result<EvalMetrics, EvalError> {
    let k = features.len();
    if k == 0 {
        return Err(EvalError::NoFeatures);
    }
    let cols: Vec<usize> = features
        .iter()
        .map(|f| {
            split
                .pre
                .feature_index(f)
                .ok_or_else(|| EvalError::UnknownFeature(f.clone()))
        })
        .collect::<Result<_, _>>()?;
    let n_pre = split.n_pre();
    if n < k + 1 || n > n_pre {
        return Err(EvalError::SizeOutOfRange {
            n,
            min: k + 1,
            max: n_pre,
        });
    }
    let complete = |recs: &[crate::dataset::Record]| -> Vec<(Vec<f64>, f64)> {
        recs.iter()
            .filter_map(|r| {
                let row: Option<Vec<f64>> = cols.iter().map(|&c| r.covariates[c]).collect();
                Some((row?, r.sdd?))
            })
            .collect()
    };
    let train = complete(&split.pre.records[n_pre - n..]);
    let test = complete(&split.test.records);
    if train.len() < k + 1 {
        return Err(EvalError::TooFewCompleteRows {
            available: train.len(),
            needed: k + 1,
        });
    }
    if test.is_empty() {
        return Err(EvalError::NoCompleteTestRows);
    }
    let x = DMatrix::from_fn(train.len(), k, |i, j| train[i].0[j]);
    let y = DVector::from_iterator(train.len(), train.iter().map(|r| r.1));
    let model = fit_ridge(&x, &y, penalty)?;
    let pred: Vec<f64> = test
        .iter()
        .map(|r| model.predict_row(r.0.iter().copied()))
        .collect();
    let obs: Vec<f64> = test.iter().map(|r| r.1).collect();
    EvalMetrics::compute(&obs, &pred, train.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_test_block, LakeSeries, Record};
    use crate::imputation::{initialize_fill, CovariateMatrix};
    use chrono::{Days, NaiveDate};
    use proptest::prelude::*;

    #[test]
    fn metric_arithmetic() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert!(matches!(mae(&[], &[]), Err(EvalError::TooShort { .. })));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch(1, 2))
        ));

        assert_eq!(nmae(&[2.0, 4.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert_eq!(nmae(&[2.0, 4.0], &[3.0, 3.0]).unwrap(), 1.0 / 3.0);
        assert!(matches!(
            nmae(&[-1.0, 1.0], &[0.0, 0.0]),
            Err(EvalError::NonPositiveMean(_))
        ));

        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[3.0, 3.0, 3.0]).unwrap(), -1.5);
        assert_eq!(
            r_squared(&[2.0, 2.0], &[1.0, 3.0]),
            Err(EvalError::ZeroVariance)
        );
        assert!(r_squared(&[2.0], &[2.0]).is_err());
    }

    #[test]
    fn threshold_scan() {
        let pts: Vec<CurvePoint> = [(50, 0.30), (100, 0.22), (150, 0.21), (200, 0.20)]
            .iter()
            .map(|&(n, nmae)| CurvePoint { n, nmae })
            .collect();
        let c = SampleCurve::from_points(pts, 0.05);
        assert_eq!(c.reference_nmae, 0.20);
        assert_eq!(c.n_star, Some(150));

        let flat: Vec<CurvePoint> = [10, 20, 30]
            .iter()
            .map(|&n| CurvePoint { n, nmae: 0.2 })
            .collect();
        assert_eq!(SampleCurve::from_points(flat, 0.05).n_star, Some(10));
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(GridSpec::default().sizes(8, 3).unwrap(), vec![5, 6, 7, 8]);
        assert_eq!(
            GridSpec {
                n_min: Some(2),
                stride: 3
            }
            .sizes(9, 3)
            .unwrap(),
            vec![2, 5, 8, 9]
        );
        assert!(matches!(
            GridSpec::default().sizes(4, 3),
            Err(EvalError::InsufficientPreTest { .. })
        ));
        assert_eq!(
            GridSpec {
                n_min: None,
                stride: 0
            }
            .sizes(9, 1),
            Err(EvalError::ZeroStride)
        );
    }

    fn lake(n: usize, p: usize, gaps: bool) -> LakeSeries {
        let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        let records = (0..n)
            .map(|i| {
                let covariates: Vec<Option<f64>> = (0..p)
                    .map(|j| {
                        let v = ((i * (j + 3) + j) % 11) as f64 * 0.3 + j as f64;
                        if gaps && (i + j) % 5 == 0 {
                            None
                        } else {
                            Some(v)
                        }
                    })
                    .collect();
                let sdd =
                    4.0 + covariates.iter().flatten().sum::<f64>() * 0.1 + (i % 3) as f64 * 0.05;
                Record {
                    lake_id: 1,
                    lake_name: "L".into(),
                    date: start + Days::new(30 * i as u64),
                    sdd: Some(sdd),
                    covariates,
                    sdd_to_bottom: false,
                }
            })
            .collect();
        LakeSeries {
            lake_id: 1,
            lake_name: "L".into(),
            feature_schema: (0..p).map(|j| format!("f{j}")).collect(),
            records,
        }
    }

    fn frame(series: &LakeSeries) -> (SplitSeries, ForecastFrame) {
        let split = split_test_block(series, 2).unwrap();
        let completed = initialize_fill(&CovariateMatrix::from_series(series)).unwrap();
        let frame = ForecastFrame::new(&split, &completed).unwrap();
        (split, frame)
    }

    #[test]
    fn backward_eval_reference_and_boundaries() {
        let s = lake(80, 3, false);
        let (_, f) = frame(&s);
        let all = f.feature_schema.clone();
        let full = backward_eval(&f, f.n_pre(), &all, 1.0).unwrap();
        let reference = f.reference_fit(1.0).unwrap();
        assert_eq!(full, reference.test);
        let smallest = backward_eval(&f, 4, &all, 1.0).unwrap();
        assert!(smallest.nmae.is_finite());
        assert!(matches!(
            backward_eval(&f, 3, &all, 1.0),
            Err(EvalError::SizeOutOfRange { .. })
        ));
        assert!(matches!(
            backward_eval(&f, f.n_pre() + 1, &all, 1.0),
            Err(EvalError::SizeOutOfRange { .. })
        ));
        assert_eq!(backward_eval(&f, 10, &[], 1.0), Err(EvalError::NoFeatures));
        assert!(matches!(
            backward_eval(&f, 10, &["nope".to_string()], 1.0),
            Err(EvalError::UnknownFeature(_))
        ));
    }

    #[test]
    fn window_ignores_older_rows() {
        let s = lake(80, 2, false);
        let (_, f) = frame(&s);
        let cols = vec![0, 1];
        let before = f.eval_columns(20, &cols, 1.0).unwrap();
        let mut g = f.clone();
        let older = g.n_pre() - 20;
        for i in 0..older {
            g.x_pre[(i, 0)] += 100.0;
            g.y_pre[i] *= 3.0;
        }
        assert_eq!(g.eval_columns(20, &cols, 1.0).unwrap(), before);
    }

    #[test]
    fn curve_ends_at_reference() {
        let s = lake(80, 3, false);
        let (_, f) = frame(&s);
        let c = sample_curve(&f, &GridSpec::default(), 0.05, 1.0).unwrap();
        assert_eq!(c.points.first().unwrap().n, 5);
        assert_eq!(c.points.last().unwrap().n, f.n_pre());
        assert_eq!(c.reference_nmae, f.reference_fit(1.0).unwrap().test.nmae);
        let n_star = c.n_star.unwrap();
        assert!(c.nmae_at(n_star).unwrap() <= 1.05 * c.reference_nmae);
    }

    #[test]
    fn complete_case_matches_imputed_without_gaps() {
        let s = lake(80, 3, false);
        let (split, f) = frame(&s);
        let all = f.feature_schema.clone();
        for n in [5, 20, f.n_pre()] {
            assert_eq!(
                complete_case_eval(&split, n, &all, 1.0).unwrap(),
                backward_eval(&f, n, &all, 1.0).unwrap()
            );
        }
    }

    #[test]
    fn complete_case_deletes_rows() {
        let s = lake(80, 3, true);
        let (split, _) = frame(&s);
        let all = split.pre.feature_schema.clone();
        let m = complete_case_eval(&split, split.n_pre(), &all, 1.0).unwrap();
        assert!(m.n_train < split.n_pre());
        // a window that leaves only k complete rows fails
        let mut tiny = split.clone();
        for r in tiny.pre.records.iter_mut().rev().skip(3) {
            r.covariates[0] = None;
        }
        for r in tiny.pre.records.iter_mut().rev().take(3) {
            r.covariates = vec![Some(1.0), Some(2.0), Some(3.0)];
        }
        assert_eq!(
            complete_case_eval(&tiny, tiny.n_pre(), &all, 1.0),
            Err(EvalError::TooFewCompleteRows {
                available: 3,
                needed: 4
            })
        );
    }

    proptest! {
        #[test]
        fn nmae_is_scale_free(y in prop::collection::vec(0.1f64..10.0, 1..30), noise in prop::collection::vec(-1.0f64..1.0, 30), c in 0.01f64..100.0) {
            let y_hat: Vec<f64> = y.iter().zip(&noise).map(|(a, e)| a + e).collect();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let hs: Vec<f64> = y_hat.iter().map(|v| v * c).collect();
            let a = nmae(&y, &y_hat).unwrap();
            let b = nmae(&ys, &hs).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn mae_is_translation_invariant(y in prop::collection::vec(-10.0f64..10.0, 1..30), noise in prop::collection::vec(-1.0f64..1.0, 30), c in -50.0f64..50.0) {
            let y_hat: Vec<f64> = y.iter().zip(&noise).map(|(a, e)| a + e).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
            let hs: Vec<f64> = y_hat.iter().map(|v| v + c).collect();
            prop_assert!((mae(&y, &y_hat).unwrap() - mae(&ys, &hs).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn n_star_matches_independent_scan(vals in prop::collection::vec(0.01f64..1.0, 1..40), tol in 0.0f64..0.2) {
            let pts: Vec<CurvePoint> = vals.iter().enumerate().map(|(i, &v)| CurvePoint { n: 3 + 2 * i, nmae: v }).collect();
            let c = SampleCurve::from_points(pts.clone(), tol);
            let reference = vals[vals.len() - 1];
            let mut expected = None;
            for p in &pts {
                if p.nmae <= (1.0 + tol) * reference {
                    expected = Some(p.n);
                    break;
                }
            }
            prop_assert_eq!(c.n_star, expected);
            prop_assert!(c.n_star.is_some());
        }
    }
}
