//! Importance ranking of covariates and the ranked forward selection that
//! finds the smallest sufficient prefix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvalError, ForecastFrame};
use crate::models::forest::{fit_forest, mdi_importances, ForestConfig, ForestError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("ranking needs at least 2 pre-test rows, got {0}")]
    TooFewRows(usize),
    #[error("rankings do not share one feature schema")]
    SchemaMismatch,
    #[error("no rankings to aggregate")]
    Empty,
    #[error("ranking does not cover the frame's features")]
    RankingMismatch,
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// `(feature, score)` in schema order.
    pub scores: Vec<(String, f64)>,
    /// Features by descending score, ties by name.
    pub order: Vec<String>,
}

impl FeatureRanking {
    pub fn from_scores(scores: Vec<(String, f64)>) -> Self {
        let mut order: Vec<&(String, f64)> = scores.iter().collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let order = order.into_iter().map(|(n, _)| n.clone()).collect();
        Self { scores, order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn top(&self, k: usize) -> &[String] {
        &self.order[..k.min(self.order.len())]
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.scores.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

/// Fit a forest on every pre-test row and rank features by MDI.
pub fn rank_features(
    frame: &ForecastFrame,
    config: &ForestConfig,
) -> Result<FeatureRanking, SelectionError> {
    if frame.n_pre() < 2 {
        return Err(SelectionError::TooFewRows(frame.n_pre()));
    }
    let forest = fit_forest(&frame.x_pre, &frame.y_pre, &frame.feature_schema, config)?;
    let scores = frame
        .feature_schema
        .iter()
        .cloned()
        .zip(mdi_importances(&forest))
        .collect();
    Ok(FeatureRanking::from_scores(scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixPoint {
    pub k: usize,
    pub nmae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k_star: usize,
    pub subset: Vec<String>,
    /// nMAE for the top-k prefix, `k = 1..=p`.
    pub nmae_by_k: Vec<PrefixPoint>,
    /// The `k = p` value.
    pub full_nmae: f64,
    pub tolerance: f64,
}

impl SelectionResult {
    /// Derive `k*` from stored prefix errors; `order` is the ranking used.
    pub fn from_points(nmae_by_k: Vec<PrefixPoint>, order: &[String], tolerance: f64) -> Self {
        let full_nmae = nmae_by_k.last().map_or(f64::NAN, |p| p.nmae);
        let threshold = (1.0 + tolerance) * full_nmae;
        let k_star = nmae_by_k
            .iter()
            .find(|p| p.nmae <= threshold)
            .map_or(order.len(), |p| p.k);
        Self {
            k_star,
            subset: order[..k_star].to_vec(),
            nmae_by_k,
            full_nmae,
            tolerance,
        }
    }
}

/// Fit ridge on all pre-test rows with the top-`k` ranked features for every
/// `k` and return the smallest `k` within tolerance of the full set.
pub fn forward_selection(
    frame: &ForecastFrame,
    ranking: &FeatureRanking,
    tolerance: f64,
    penalty: f64,
) -> Result<SelectionResult, SelectionError> {
    if ranking.len() != frame.n_features() {
        return Err(SelectionError::RankingMismatch);
    }
    let ranked_cols = frame
        .feature_indices(&ranking.order)
        .map_err(|_| SelectionError::RankingMismatch)?;
    let n = frame.n_pre();
    let points = (1..=ranked_cols.len())
        .into_par_iter()
        .map(|k| {
            frame
                .eval_columns(n, &ranked_cols[..k], penalty)
                .map(|m| PrefixPoint { k, nmae: m.nmae })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SelectionResult::from_points(
        points,
        &ranking.order,
        tolerance,
    ))
}

/// Average per-lake scores feature by feature and re-rank.
///
/// Each feature's scores are summed in sorted order, so the result does not
/// depend on the order of `per_lake`.
pub fn aggregate_ranking(per_lake: &[FeatureRanking]) -> Result<FeatureRanking, SelectionError> {
    let first = per_lake.first().ok_or(SelectionError::Empty)?;
    let mut names: Vec<&String> = first.scores.iter().map(|(n, _)| n).collect();
    names.sort();
    for r in per_lake {
        let mut other: Vec<&String> = r.scores.iter().map(|(n, _)| n).collect();
        other.sort();
        if other != names {
            return Err(SelectionError::SchemaMismatch);
        }
    }
    let count = per_lake.len() as f64;
    let scores = first
        .scores
        .iter()
        .map(|(name, _)| {
            let mut vals: Vec<f64> = per_lake
                .iter()
                .map(|r| r.score(name).expect("checked"))
                .collect();
            vals.sort_by(f64::total_cmp);
            (name.clone(), vals.iter().sum::<f64>() / count)
        })
        .collect();
    Ok(FeatureRanking::from_scores(scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(pairs: &[(&str, f64)]) -> FeatureRanking {
        FeatureRanking::from_scores(pairs.iter().map(|(n, s)| (n.to_string(), *s)).collect())
    }

    #[test]
    fn order_is_descending_with_name_tiebreak() {
        let r = ranking(&[("b", 0.0), ("c", 0.5), ("a", 0.0), ("d", 0.5)]);
        assert_eq!(r.order, vec!["c", "d", "a", "b"]);
    }

    #[test]
    fn k_star_threshold() {
        let order: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let pts = vec![
            PrefixPoint { k: 1, nmae: 0.30 },
            PrefixPoint { k: 2, nmae: 0.21 },
            PrefixPoint { k: 3, nmae: 0.20 },
        ];
        let r = SelectionResult::from_points(pts, &order, 0.05);
        assert_eq!(r.k_star, 2);
        assert_eq!(r.subset, vec!["x", "y"]);
        assert_eq!(r.full_nmae, 0.20);

        let single =
            SelectionResult::from_points(vec![PrefixPoint { k: 1, nmae: 0.4 }], &order[..1], 0.05);
        assert_eq!(single.k_star, 1);
    }

    #[test]
    fn aggregate_single_is_identity() {
        let r = ranking(&[("a", 0.7), ("b", 0.3)]);
        assert_eq!(aggregate_ranking(std::slice::from_ref(&r)).unwrap(), r);
    }

    #[test]
    fn aggregate_tie_resolved_by_name() {
        let l1 = ranking(&[("A", 0.6), ("B", 0.4)]);
        let l2 = ranking(&[("A", 0.4), ("B", 0.6)]);
        let agg = aggregate_ranking(&[l1, l2]).unwrap();
        assert_eq!(agg.score("A"), Some(0.5));
        assert_eq!(agg.score("B"), Some(0.5));
        assert_eq!(agg.order, vec!["A", "B"]);
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate_ranking(&[]), Err(SelectionError::Empty));
        let l1 = ranking(&[("A", 0.6), ("B", 0.4)]);
        let l2 = ranking(&[("A", 0.6), ("C", 0.4)]);
        assert_eq!(
            aggregate_ranking(&[l1, l2]),
            Err(SelectionError::SchemaMismatch)
        );
    }

    #[test]
    fn aggregate_accepts_reordered_schema() {
        let l1 = ranking(&[("A", 0.6), ("B", 0.4)]);
        let l2 = ranking(&[("B", 0.2), ("A", 0.8)]);
        let agg = aggregate_ranking(&[l1, l2]).unwrap();
        assert_eq!(agg.order, vec!["A", "B"]);
        assert!((agg.score("A").unwrap() - 0.7).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn aggregate_is_order_invariant(
            lakes in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 1..10),
            seed in proptest::prelude::any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let names = ["w", "x", "y", "z"];
            let rankings: Vec<FeatureRanking> = lakes
                .iter()
                .map(|s| FeatureRanking::from_scores(names.iter().zip(s).map(|(n, v)| (n.to_string(), *v)).collect()))
                .collect();
            let mut shuffled = rankings.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert_eq!(aggregate_ranking(&rankings).unwrap(), aggregate_ranking(&shuffled).unwrap());
        }
    }
}
