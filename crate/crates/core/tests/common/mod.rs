#![allow(dead_code)]

use limnoplan::dataset::{split_test_block, LakeSeries, SplitSeries};
use limnoplan::evaluation::ForecastFrame;
use limnoplan::imputation::{mice_impute, CompletedMatrix, CovariateMatrix, ImputeConfig};
use limnoplan::synth::{generate_lake, SynthConfig, SynthTruth};
use nalgebra::{DMatrix, DVector};

pub fn lake(cfg: &SynthConfig) -> (LakeSeries, SynthTruth) {
    generate_lake(cfg).expect("valid synth config")
}

/// Grow or shrink `n_samples` until the pre-test block has exactly `n_pre`
/// rows under a `years` test block.
pub fn with_pre_count(mut cfg: SynthConfig, n_pre: usize, years: u32) -> SynthConfig {
    for _ in 0..10 {
        let (series, _) = lake(&cfg);
        let got = split_test_block(&series, years).unwrap().n_pre();
        if got == n_pre {
            return cfg;
        }
        cfg.n_samples = (cfg.n_samples as i64 + n_pre as i64 - got as i64) as usize;
    }
    panic!("could not hit n_pre = {n_pre}");
}

pub struct Prepared {
    pub series: LakeSeries,
    pub split: SplitSeries,
    pub completed: CompletedMatrix,
    pub frame: ForecastFrame,
}

pub fn prepare(series: LakeSeries, years: u32) -> Prepared {
    let split = split_test_block(&series, years).unwrap();
    let (completed, _) = mice_impute(
        &CovariateMatrix::from_series(&series),
        &ImputeConfig::default(),
    )
    .unwrap();
    let frame = ForecastFrame::new(&split, &completed).unwrap();
    Prepared {
        series,
        split,
        completed,
        frame,
    }
}

/// Ridge by the textbook route: population-sd standardization computed
/// here, then `(ZᵀZ + λI)⁻¹ Zᵀ(y − ȳ)` through an LU inverse.
pub struct OracleRidge {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl OracleRidge {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, penalty: f64) -> Self {
        let (n, k) = x.shape();
        let mut means = vec![0.0; k];
        let mut stds = vec![0.0; k];
        for j in 0..k {
            let m = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x[(i, j)] - m).powi(2)).sum::<f64>() / n as f64;
            means[j] = m;
            stds[j] = if v.sqrt() <= 1e-12 * m.abs().max(1.0) {
                1.0
            } else {
                v.sqrt()
            };
        }
        let z = DMatrix::from_fn(n, k, |i, j| (x[(i, j)] - means[j]) / stds[j]);
        let ybar = y.mean();
        let yc = y.map(|v| v - ybar);
        let a = z.transpose() * &z + DMatrix::identity(k, k) * penalty;
        let weights = a.lu().try_inverse().expect("invertible") * z.transpose() * yc;
        Self {
            weights,
            intercept: ybar,
            means,
            stds,
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.intercept
                    + (0..x.ncols())
                        .map(|j| self.weights[j] * (x[(i, j)] - self.means[j]) / self.stds[j])
                        .sum::<f64>()
            })
            .collect()
    }
}

pub fn oracle_nmae(y: &[f64], y_hat: &[f64]) -> f64 {
    let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    mae / (y.iter().sum::<f64>() / y.len() as f64)
}

/// Test nMAE of the oracle fitted on the last `n` pre-test rows and the
/// columns `cols`.
pub fn oracle_cell(frame: &ForecastFrame, n: usize, cols: &[usize], penalty: f64) -> f64 {
    let start = frame.n_pre() - n;
    let x = DMatrix::from_fn(n, cols.len(), |i, j| frame.x_pre[(start + i, cols[j])]);
    let y = DVector::from_fn(n, |i, _| frame.y_pre[start + i]);
    let xt = DMatrix::from_fn(frame.n_test(), cols.len(), |i, j| {
        frame.x_test[(i, cols[j])]
    });
    let fit = OracleRidge::fit(&x, &y, penalty);
    oracle_nmae(frame.y_test.as_slice(), &fit.predict(&xt))
}
