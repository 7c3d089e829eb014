//! Seeded synthetic lakes with known coefficients.
//!
//! Covariates follow a stationary AR(1) process around a sinusoidal seasonal
//! mean, optionally sharing a common latent factor. SDD is linear in the
//! clean covariates plus a seasonal term and Gaussian noise. Missingness is
//! injected afterwards, so the clean matrix in [`SynthTruth`] is the ground
//! truth for imputation and ridge recovery.

use std::f64::consts::PI;

use chrono::{Days, NaiveDate};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LakeSeries, Record};

const YEAR_DAYS: f64 = 365.25;
/// Generated SDD never drops below this many meters.
pub const MIN_SDD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("need at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("need at least one feature")]
    NoFeatures,
    #[error("{field} has length {got}, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("missing fraction {value} for {feature} is outside [0, 1)")]
    BadFraction { feature: String, value: f64 },
    #[error("driver index {0} is out of range")]
    BadDriver(usize),
    #[error("{0} must be in [0, 1)")]
    OutOfUnitRange(&'static str),
    #[error("{0} must be finite and nonnegative")]
    Negative(&'static str),
    #[error("sampling interval must be at least one day")]
    ZeroInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingMechanism {
    /// A uniformly random subset of exactly `round(f·n)` cells per column.
    #[default]
    Mcar,
    /// Each cell of a non-driver column goes missing with probability
    /// `σ(b + slope·z)`, `z` the standardized clean driver value and `b`
    /// calibrated so the expected rate equals the column's fraction. The
    /// driver column itself is MCAR.
    Mar { driver: usize, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub lake_id: u32,
    pub lake_name: String,
    pub n_samples: usize,
    pub n_features: usize,
    /// Defaults to `x1..xp` when empty.
    pub feature_names: Vec<String>,
    pub true_weights: Vec<f64>,
    pub intercept: f64,
    pub seasonal_amplitude: f64,
    pub noise_sd: f64,
    /// One entry per feature; empty means no gaps.
    pub missing_fraction: Vec<f64>,
    pub missing_mechanism: MissingMechanism,
    /// Fraction of SDD observations removed, MCAR.
    pub sdd_missing_fraction: f64,
    pub start_date: NaiveDate,
    pub sampling_interval_days: u32,
    /// Lag-one autocorrelation of each covariate.
    pub ar_coefficient: f64,
    /// Loading of every covariate on one shared latent series.
    pub factor_loading: f64,
    /// Amplitude of each covariate's seasonal mean.
    pub covariate_seasonal: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lake_id: 1,
            lake_name: "Synthetic Lake".into(),
            n_samples: 200,
            n_features: 4,
            feature_names: Vec::new(),
            true_weights: vec![0.8, 0.0, 0.0, 0.0],
            intercept: 5.0,
            seasonal_amplitude: 0.5,
            noise_sd: 0.2,
            missing_fraction: Vec::new(),
            missing_mechanism: MissingMechanism::Mcar,
            sdd_missing_fraction: 0.0,
            start_date: NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date"),
            sampling_interval_days: 14,
            ar_coefficient: 0.5,
            factor_loading: 0.0,
            covariate_seasonal: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn names(&self) -> Vec<String> {
        if self.feature_names.is_empty() {
            (1..=self.n_features).map(|j| format!("x{j}")).collect()
        } else {
            self.feature_names.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let p = self.n_features;
        if self.n_samples < 4 {
            return Err(SynthError::TooFewSamples(self.n_samples));
        }
        if p == 0 {
            return Err(SynthError::NoFeatures);
        }
        let check_len = |field, got: usize| {
            if got == p {
                Ok(())
            } else {
                Err(SynthError::LengthMismatch {
                    field,
                    expected: p,
                    got,
                })
            }
        };
        check_len("true_weights", self.true_weights.len())?;
        if !self.feature_names.is_empty() {
            check_len("feature_names", self.feature_names.len())?;
        }
        if !self.missing_fraction.is_empty() {
            check_len("missing_fraction", self.missing_fraction.len())?;
        }
        let names = self.names();
        for (name, &f) in names.iter().zip(&self.missing_fraction) {
            if !(0.0..1.0).contains(&f) {
                return Err(SynthError::BadFraction {
                    feature: name.clone(),
                    value: f,
                });
            }
        }
        if !(0.0..1.0).contains(&self.sdd_missing_fraction) {
            return Err(SynthError::BadFraction {
                feature: "sdd".into(),
                value: self.sdd_missing_fraction,
            });
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(SynthError::OutOfUnitRange("ar_coefficient"));
        }
        if !(0.0..1.0).contains(&self.factor_loading) {
            return Err(SynthError::OutOfUnitRange("factor_loading"));
        }
        for (field, v) in [
            ("noise_sd", self.noise_sd),
            ("seasonal_amplitude", self.seasonal_amplitude),
            ("covariate_seasonal", self.covariate_seasonal),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SynthError::Negative(field));
            }
        }
        if self.sampling_interval_days == 0 {
            return Err(SynthError::ZeroInterval);
        }
        if let MissingMechanism::Mar { driver, .. } = self.missing_mechanism {
            if driver >= p {
                return Err(SynthError::BadDriver(driver));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub feature_schema: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Covariates before any cell was removed.
    pub clean_covariates: DMatrix<f64>,
    /// SDD before removal, after the positivity floor.
    pub clean_sdd: Vec<f64>,
    /// `true` where a covariate cell was removed.
    pub mask: DMatrix<bool>,
    pub realized_missing: Vec<f64>,
    /// Number of SDD values raised to [`MIN_SDD`].
    pub floored_sdd: usize,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Intercept `b` with `mean σ(b + slope·z) = target`, by bisection.
fn calibrate_intercept(z: &[f64], slope: f64, target: f64) -> f64 {
    let rate = |b: f64| z.iter().map(|&v| sigmoid(b + slope * v)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn mcar_rows(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> Vec<usize> {
    let count = (fraction * n as f64).round() as usize;
    sample(rng, n, count.min(n - 1)).into_vec()
}

pub fn generate_lake(config: &SynthConfig) -> Result<(LakeSeries, SynthTruth), SynthError> {
    config.validate()?;
    let n = config.n_samples;
    let p = config.n_features;
    let names = config.names();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let phi = config.ar_coefficient;
    let innov = (1.0 - phi * phi).sqrt();
    let a = config.factor_loading;
    let own = (1.0 - a * a).sqrt();
    let mut factor = gauss(&mut rng);
    let mut state: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();

    let dates: Vec<NaiveDate> = (0..n)
        .map(|i| config.start_date + Days::new(i as u64 * config.sampling_interval_days as u64))
        .collect();
    let day = |i: usize| (i as u64 * config.sampling_interval_days as u64) as f64;

    let mut clean = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        if i > 0 {
            factor = phi * factor + innov * gauss(&mut rng);
            for s in state.iter_mut() {
                *s = phi * *s + innov * gauss(&mut rng);
            }
        }
        let angle = 2.0 * PI * day(i) / YEAR_DAYS;
        for j in 0..p {
            let phase = 2.0 * PI * j as f64 / p as f64;
            clean[(i, j)] =
                config.covariate_seasonal * (angle + phase).sin() + a * factor + own * state[j];
        }
    }

    let mut floored_sdd = 0;
    let clean_sdd: Vec<f64> = (0..n)
        .map(|i| {
            let angle = 2.0 * PI * day(i) / YEAR_DAYS;
            let linear: f64 = (0..p).map(|j| config.true_weights[j] * clean[(i, j)]).sum();
            let v = config.intercept
                + linear
                + config.seasonal_amplitude * angle.sin()
                + config.noise_sd * gauss(&mut rng);
            if v < MIN_SDD {
                floored_sdd += 1;
                MIN_SDD
            } else {
                v
            }
        })
        .collect();

    let mut mask = DMatrix::<bool>::from_element(n, p, false);
    let fractions = if config.missing_fraction.is_empty() {
        vec![0.0; p]
    } else {
        config.missing_fraction.clone()
    };
    for j in 0..p {
        let f = fractions[j];
        if f == 0.0 {
            continue;
        }
        match config.missing_mechanism {
            MissingMechanism::Mar { driver, slope } if driver != j => {
                let col = clean.column(driver);
                let mean = col.mean();
                let sd = col.variance().sqrt().max(f64::MIN_POSITIVE);
                let z: Vec<f64> = col.iter().map(|v| (v - mean) / sd).collect();
                let b = calibrate_intercept(&z, slope, f);
                for (i, &zi) in z.iter().enumerate() {
                    mask[(i, j)] = rng.random::<f64>() < sigmoid(b + slope * zi);
                }
                if (0..n).all(|i| mask[(i, j)]) {
                    let keep = rng.random_range(0..n);
                    mask[(keep, j)] = false;
                }
            }
            _ => {
                for i in mcar_rows(&mut rng, n, f) {
                    mask[(i, j)] = true;
                }
            }
        }
    }
    let sdd_gone = if config.sdd_missing_fraction > 0.0 {
        mcar_rows(&mut rng, n, config.sdd_missing_fraction)
    } else {
        Vec::new()
    };

    let records = (0..n)
        .map(|i| Record {
            lake_id: config.lake_id,
            lake_name: config.lake_name.clone(),
            date: dates[i],
            sdd: (!sdd_gone.contains(&i)).then_some(clean_sdd[i]),
            covariates: (0..p)
                .map(|j| (!mask[(i, j)]).then_some(clean[(i, j)]))
                .collect(),
            sdd_to_bottom: false,
        })
        .collect();
    let realized_missing = (0..p)
        .map(|j| mask.column(j).iter().filter(|&&m| m).count() as f64 / n as f64)
        .collect();

    let series = LakeSeries {
        lake_id: config.lake_id,
        lake_name: config.lake_name.clone(),
        feature_schema: names.clone(),
        records,
    };
    let truth = SynthTruth {
        feature_schema: names,
        weights: config.true_weights.clone(),
        intercept: config.intercept,
        clean_covariates: clean,
        clean_sdd,
        mask,
        realized_missing,
        floored_sdd,
    };
    Ok((series, truth))
}
