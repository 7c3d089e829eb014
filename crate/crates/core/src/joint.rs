//! Joint search over training-history length `n` and ranked-prefix size
//! `k`.
//!
//! Every `(n, k)` cell holds the test nMAE of a ridge fit on the `n` most
//! recent pre-test rows using the top-`k` ranked features. A cell is
//! feasible when its nMAE is at most `τ = (1 + tolerance) · nMAE(N_pre, p)`;
//! cells with `n < k + 1` are excluded and never feasible. The minimal
//! configuration is the lexicographically smallest feasible `(n, k)`.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvalError, ForecastFrame, GridSpec};
use crate::selection::FeatureRanking;

#[derive(Debug, Error)]
pub enum JointError {
    #[error("pre-test pool needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("ranking does not cover the frame's features")]
    RankingMismatch,
    #[error("malformed grid: {0}")]
    Malformed(String),
    #[error("no configurations to aggregate")]
    Empty,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityGrid {
    /// Ascending training sizes; the last entry is `N_pre`.
    pub n_grid: Vec<usize>,
    /// Ranking whose prefixes define `k`; its length is `p`.
    pub order: Vec<String>,
    /// `nmae[i][k - 1]` for `n = n_grid[i]`; `None` marks an excluded cell.
    pub nmae: Vec<Vec<Option<f64>>>,
    pub full_nmae: f64,
    pub tolerance: f64,
    pub tau: f64,
}

impl FeasibilityGrid {
    /// Build a grid from stored errors. Cells with `n < k + 1` are forced to
    /// `None`; every other cell must carry a value.
    pub fn from_table(
        n_grid: Vec<usize>,
        order: Vec<String>,
        mut nmae: Vec<Vec<Option<f64>>>,
        full_nmae: f64,
        tolerance: f64,
    ) -> Result<Self, JointError> {
        let p = order.len();
        if n_grid.is_empty() || p == 0 {
            return Err(JointError::Malformed("empty grid".into()));
        }
        if n_grid.windows(2).any(|w| w[0] >= w[1]) || n_grid[0] == 0 {
            return Err(JointError::Malformed(
                "n grid must be positive and strictly ascending".into(),
            ));
        }
        if nmae.len() != n_grid.len() || nmae.iter().any(|row| row.len() != p) {
            return Err(JointError::Malformed(
                "table shape does not match grid".into(),
            ));
        }
        for (row, &n) in nmae.iter_mut().zip(&n_grid) {
            for (kk, cell) in row.iter_mut().enumerate() {
                if n < kk + 2 {
                    *cell = None;
                } else if cell.is_none() {
                    return Err(JointError::Malformed(format!(
                        "missing value at n={n}, k={}",
                        kk + 1
                    )));
                }
            }
        }
        Ok(Self {
            n_grid,
            order,
            nmae,
            full_nmae,
            tolerance,
            tau: (1.0 + tolerance) * full_nmae,
        })
    }

    pub fn p(&self) -> usize {
        self.order.len()
    }

    pub fn n_pre(&self) -> usize {
        *self.n_grid.last().expect("nonempty grid")
    }

    pub fn is_excluded(n: usize, k: usize) -> bool {
        n < k + 1
    }

    pub fn value(&self, n: usize, k: usize) -> Option<f64> {
        let i = self.n_grid.iter().position(|&x| x == n)?;
        self.nmae[i].get(k.checked_sub(1)?).copied().flatten()
    }

    pub fn is_feasible(&self, n: usize, k: usize) -> bool {
        self.value(n, k).is_some_and(|v| v <= self.tau)
    }

    /// Feasible pairs in lexicographic order.
    pub fn feasible_pairs(&self) -> Vec<(usize, usize)> {
        self.n_grid
            .iter()
            .zip(&self.nmae)
            .flat_map(|(&n, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_some_and(|v| v <= self.tau))
                    .map(move |(kk, _)| (n, kk + 1))
            })
            .collect()
    }

    pub fn excluded_pairs(&self) -> Vec<(usize, usize)> {
        self.n_grid
            .iter()
            .flat_map(|&n| {
                (1..=self.p())
                    .filter(move |&k| Self::is_excluded(n, k))
                    .map(move |k| (n, k))
            })
            .collect()
    }

    /// Same stored errors thresholded at another tolerance.
    pub fn rethreshold(&self, tolerance: f64) -> Self {
        Self {
            tolerance,
            tau: (1.0 + tolerance) * self.full_nmae,
            ..self.clone()
        }
    }

    /// Rows `n,k,nmae,feasible`; excluded cells have an empty `nmae` and
    /// `feasible = 0`. With `lake_id`, a leading `midas` column is added.
    pub fn write_csv<W: Write>(&self, writer: W, lake_id: Option<u32>) -> Result<(), JointError> {
        let mut wtr = csv::Writer::from_writer(writer);
        self.write_rows(&mut wtr, lake_id, true)?;
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_rows<W: Write>(
        &self,
        wtr: &mut csv::Writer<W>,
        lake_id: Option<u32>,
        header: bool,
    ) -> Result<(), JointError> {
        if header {
            let mut h = vec!["n", "k", "nmae", "feasible"];
            if lake_id.is_some() {
                h.insert(0, "midas");
            }
            wtr.write_record(&h)?;
        }
        for (&n, row) in self.n_grid.iter().zip(&self.nmae) {
            for (kk, v) in row.iter().enumerate() {
                let mut rec = vec![
                    n.to_string(),
                    (kk + 1).to_string(),
                    v.map_or_else(String::new, |x| x.to_string()),
                    u8::from(v.is_some_and(|x| x <= self.tau)).to_string(),
                ];
                if let Some(id) = lake_id {
                    rec.insert(0, id.to_string());
                }
                wtr.write_record(&rec)?;
            }
        }
        Ok(())
    }
}

/// Evaluate every non-excluded `(n, k)` over `grid × 1..=p`.
pub fn feasibility_grid(
    frame: &ForecastFrame,
    ranking: &FeatureRanking,
    grid: &GridSpec,
    tolerance: f64,
    penalty: f64,
) -> Result<FeasibilityGrid, JointError> {
    let n_pre = frame.n_pre();
    if n_pre < 2 {
        return Err(JointError::TooFewRows(n_pre));
    }
    if ranking.len() != frame.n_features() {
        return Err(JointError::RankingMismatch);
    }
    let cols = frame
        .feature_indices(&ranking.order)
        .map_err(|_| JointError::RankingMismatch)?;
    let p = cols.len();
    let n_grid = grid.sizes(n_pre, p)?;

    let table = n_grid
        .par_iter()
        .map(|&n| {
            (1..=p)
                .map(|k| {
                    if FeasibilityGrid::is_excluded(n, k) {
                        Ok(None)
                    } else {
                        frame
                            .eval_columns(n, &cols[..k], penalty)
                            .map(|m| Some(m.nmae))
                    }
                })
                .collect::<Result<Vec<_>, EvalError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let full_nmae = table
        .last()
        .and_then(|row| row[p - 1])
        .ok_or_else(|| JointError::Malformed("reference cell excluded".into()))?;
    FeasibilityGrid::from_table(n_grid, ranking.order.clone(), table, full_nmae, tolerance)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalConfig {
    pub lake_id: u32,
    pub n_hat: usize,
    pub k_hat: usize,
    pub selected_features: Vec<String>,
    /// Set when no pair other than the full reference `(N_pre, p)` meets the
    /// tolerance; the configuration is then `(N_pre, p)`.
    pub fallback: bool,
}

/// Lexicographic minimum of the feasible set, minimizing `n` then `k`.
pub fn minimal_config(grid: &FeasibilityGrid, lake_id: u32) -> MinimalConfig {
    let reference = (grid.n_pre(), grid.p());
    let (n_hat, k_hat) = grid.feasible_pairs().first().copied().unwrap_or(reference);
    MinimalConfig {
        lake_id,
        n_hat,
        k_hat,
        selected_features: grid.order[..k_hat].to_vec(),
        fallback: (n_hat, k_hat) == reference,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub n_lakes: usize,
    pub median_n: f64,
    pub iqr_n: f64,
    pub median_k: f64,
    pub iqr_k: f64,
    /// Share of single-feature lakes selecting each feature.
    pub feature_frequency: BTreeMap<String, f64>,
    pub single_feature_lakes: usize,
    pub fallback_count: usize,
    pub fallback_excluded: bool,
}

/// Linear-interpolation quantile of sorted data: position `(len − 1)·q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median_iqr(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    (
        quantile_sorted(&values, 0.5),
        quantile_sorted(&values, 0.75) - quantile_sorted(&values, 0.25),
    )
}

/// Median and IQR of `n̂` and `k̂` across lakes, plus which feature the
/// single-feature lakes picked. Fallback lakes count at `(N_pre, p)` unless
/// `exclude_fallback` is set.
pub fn aggregate_configs(
    configs: &[MinimalConfig],
    exclude_fallback: bool,
) -> Result<JointSummary, JointError> {
    let fallback_count = configs.iter().filter(|c| c.fallback).count();
    let used: Vec<&MinimalConfig> = configs
        .iter()
        .filter(|c| !(exclude_fallback && c.fallback))
        .collect();
    if used.is_empty() {
        return Err(JointError::Empty);
    }
    let (median_n, iqr_n) = median_iqr(used.iter().map(|c| c.n_hat as f64).collect());
    let (median_k, iqr_k) = median_iqr(used.iter().map(|c| c.k_hat as f64).collect());

    let singles: Vec<&&MinimalConfig> = used.iter().filter(|c| c.k_hat == 1).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in &singles {
        *counts.entry(c.selected_features[0].clone()).or_default() += 1;
    }
    let feature_frequency = counts
        .into_iter()
        .map(|(name, c)| (name, c as f64 / singles.len() as f64))
        .collect();

    Ok(JointSummary {
        n_lakes: used.len(),
        median_n,
        iqr_n,
        median_k,
        iqr_k,
        feature_frequency,
        single_feature_lakes: singles.len(),
        fallback_count,
        fallback_excluded: exclude_fallback,
    })
}
