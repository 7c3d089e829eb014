//! End-to-end run over many lakes: exclusions, split, imputation, reference
//! fit, sample curve, feature ranking, forward selection and joint search.
//!
//! Lakes run concurrently; results are merged in input order so the JSON
//! bundle is byte-identical across runs and worker counts. Every stage that
//! does not depend on the tolerance can be cached on disk, keyed by lake,
//! stage, the lake's data digest and a hash of the fit-relevant config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::dataset::{
    apply_exclusions, missingness_profile, select_top_lakes, split_test_block, LakeSeries,
    MissingnessProfile, SplitSeries,
};
use crate::evaluation::{
    sample_curve, EvalMetrics, ForecastFrame, GridSpec, ReferenceFit, SampleCurve,
};
use crate::imputation::{mice_impute, CompletedMatrix, CovariateMatrix, FitReport, ImputeConfig};
use crate::joint::{
    aggregate_configs, feasibility_grid, minimal_config, FeasibilityGrid, JointSummary,
    MinimalConfig,
};
use crate::models::forest::{tree_seed, ForestConfig};
use crate::selection::{
    aggregate_ranking, forward_selection, rank_features, FeatureRanking, SelectionResult,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub test_years: u32,
    pub tolerance: f64,
    pub penalty: f64,
    pub impute: ImputeConfig,
    pub forest: ForestConfig,
    pub grid: GridSpec,
    pub seed: u64,
    /// Drop fallback lakes from the cross-lake medians.
    pub exclude_fallback: bool,
    /// Feed the cross-lake aggregate ranking, not each lake's own, to the
    /// joint search.
    pub global_ranking: bool,
    /// Keep only the `k` lakes with the lowest mean missingness.
    pub top_lakes: Option<usize>,
    /// Drop leakage covariates and SDD-to-bottom records first.
    pub apply_exclusions: bool,
    /// Thread count; `None` uses the global pool.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            test_years: 5,
            tolerance: 0.05,
            penalty: 1.0,
            impute: ImputeConfig::default(),
            forest: ForestConfig::default(),
            grid: GridSpec::default(),
            seed: 0,
            exclude_fallback: false,
            global_ranking: false,
            top_lakes: None,
            apply_exclusions: true,
            workers: None,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.test_years < 1 {
            return bad("test_years must be at least 1");
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.penalty.is_finite() && self.penalty >= 0.0) {
            return bad("ridge penalty must be nonnegative");
        }
        if self.grid.stride == 0 {
            return bad("grid stride must be positive");
        }
        if self.forest.n_trees == 0 {
            return bad("forest needs at least one tree");
        }
        if self.top_lakes == Some(0) {
            return bad("top_lakes must be positive");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        Ok(())
    }

    /// Digest of the whole serialized config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Digest of the settings that change fitted values; tolerance and the
    /// aggregation toggles are left out so re-thresholding reuses the cache.
    pub fn fit_hash(&self) -> String {
        let fit = RunConfig {
            tolerance: 0.0,
            exclude_fallback: false,
            ..self.clone()
        };
        fit.hash()
    }

    /// Seed for one stage of one lake.
    pub fn stage_seed(&self, lake_id: u32, stage: u64) -> u64 {
        tree_seed(tree_seed(self.seed, lake_id as usize), stage as usize)
    }
}

/// JSON files under `root/<lake>/<stage>-<key>.json`.
#[derive(Debug)]
pub struct StageCache {
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn path(&self, lake_id: u32, stage: &str, key: &str) -> PathBuf {
        self.root
            .join(lake_id.to_string())
            .join(format!("{stage}-{key}.json"))
    }

    pub fn load<T: DeserializeOwned>(&self, lake_id: u32, stage: &str, key: &str) -> Option<T> {
        let found = fs::read(self.path(lake_id, stage, key))
            .ok()
            .and_then(|bytes| serde_json::from_slice(&bytes).ok());
        let counter = if found.is_some() {
            &self.hits
        } else {
            &self.misses
        };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn store<T: Serialize>(&self, lake_id: u32, stage: &str, key: &str, value: &T) {
        let path = self.path(lake_id, stage, key);
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(path.parent().expect("has parent"))?;
            let tmp = path.with_extension("tmp");
            fs::write(
                &tmp,
                serde_json::to_vec(value).map_err(std::io::Error::other)?,
            )?;
            fs::rename(&tmp, &path)
        };
        if let Err(e) = write() {
            warn!(path = %path.display(), error = %e, "cache write failed");
        }
    }

    fn get_or<T, E>(
        &self,
        lake_id: u32,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T, E>,
    ) -> Result<T, E>
    where
        T: Serialize + DeserializeOwned,
    {
        if let Some(v) = self.load(lake_id, stage, key) {
            return Ok(v);
        }
        let v = compute()?;
        self.store(lake_id, stage, key, &v);
        Ok(v)
    }
}

fn cached<T, E>(
    cache: Option<&StageCache>,
    lake_id: u32,
    stage: &str,
    key: &str,
    compute: impl FnOnce() -> Result<T, E>,
) -> Result<T, E>
where
    T: Serialize + DeserializeOwned,
{
    match cache {
        Some(c) => c.get_or(lake_id, stage, key, compute),
        None => compute(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeFailure {
    pub lake_id: u32,
    pub lake_name: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeReport {
    pub lake_id: u32,
    pub lake_name: String,
    pub n_records: usize,
    pub n_pre: usize,
    pub n_test: usize,
    pub test_boundary: chrono::NaiveDate,
    /// Computed after exclusions.
    pub missingness: MissingnessProfile,
    pub imputation: FitReport,
    pub reference: ReferenceFit,
    pub sample_curve: SampleCurve,
    pub ranking: FeatureRanking,
    pub selection: SelectionResult,
    pub minimal_config: MinimalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTestRow {
    pub lake: String,
    pub train_mae: f64,
    pub test_mae: f64,
    pub train_nmae: f64,
    pub test_nmae: f64,
    /// Test error at or below the in-sample error on both MAE and nMAE.
    pub test_le_train: bool,
}

impl TrainTestRow {
    pub fn new(lake: impl Into<String>, train: &EvalMetrics, test: &EvalMetrics) -> Self {
        Self {
            lake: lake.into(),
            train_mae: train.mae,
            test_mae: test.mae,
            train_nmae: train.nmae,
            test_nmae: test.nmae,
            test_le_train: test.mae <= train.mae && test.nmae <= train.nmae,
        }
    }
}

pub fn train_test_table(reports: &[LakeReport]) -> Vec<TrainTestRow> {
    reports
        .iter()
        .map(|r| TrainTestRow::new(&r.lake_name, &r.reference.train, &r.reference.test))
        .collect()
}

pub fn write_train_test_csv<W: Write>(
    writer: W,
    rows: &[TrainTestRow],
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config_hash: String,
    pub config: RunConfig,
    pub lakes: Vec<LakeReport>,
    pub failures: Vec<LakeFailure>,
    pub train_test: Vec<TrainTestRow>,
    pub aggregate_ranking: Option<FeatureRanking>,
    pub joint_summary: Option<JointSummary>,
    /// Mean `n*` over lakes where one exists.
    pub mean_n_star: Option<f64>,
    pub lakes_without_n_star: usize,
}

impl ReportBundle {
    /// 0 when every lake succeeded, 1 when any failed or none ran.
    pub fn exit_code(&self) -> i32 {
        if self.lakes.is_empty() || !self.failures.is_empty() {
            1
        } else {
            0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }
}

/// Per-lake artifacts that stay out of the JSON bundle.
#[derive(Debug, Clone)]
pub struct LakeArtifacts {
    pub lake_id: u32,
    pub series: LakeSeries,
    pub completed: CompletedMatrix,
    pub grid: FeasibilityGrid,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub bundle: ReportBundle,
    pub artifacts: Vec<LakeArtifacts>,
}

/// A lake split, imputed and framed for the forecast protocols.
#[derive(Debug, Clone)]
pub struct PreparedLake {
    pub series: LakeSeries,
    pub split: SplitSeries,
    pub missingness: MissingnessProfile,
    pub completed: CompletedMatrix,
    pub imputation: FitReport,
    pub frame: ForecastFrame,
    /// Cache key for this lake's data under this config's fit settings.
    pub key: String,
}

struct FirstPass {
    prepared: PreparedLake,
    reference: ReferenceFit,
    curve: SampleCurve,
    ranking: FeatureRanking,
    selection: SelectionResult,
}

/// A lake that failed a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFailure {
    pub stage: &'static str,
    pub message: String,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageFailure {}

fn fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageFailure {
    move |e| StageFailure {
        stage,
        message: e.to_string(),
    }
}

impl RunConfig {
    pub fn impute_config_for(&self, lake_id: u32) -> ImputeConfig {
        ImputeConfig {
            seed: self.stage_seed(lake_id, 1),
            ..self.impute.clone()
        }
    }

    pub fn forest_config_for(&self, lake_id: u32) -> ForestConfig {
        ForestConfig {
            seed: self.stage_seed(lake_id, 2),
            ..self.forest.clone()
        }
    }
}

/// Split, impute (over the whole series) and build the forecast frame. The
/// series is used as given; exclusions are the caller's job.
pub fn prepare_lake(
    series: LakeSeries,
    config: &RunConfig,
    cache: Option<&StageCache>,
) -> Result<PreparedLake, StageFailure> {
    let id = series.lake_id;
    let digest = sha256_hex(&serde_json::to_vec(&series).expect("series serializes"));
    let key = sha256_hex(format!("{}:{digest}", config.fit_hash()).as_bytes())[..32].to_string();

    let missingness = missingness_profile(&series).map_err(fail("missingness"))?;
    let split = split_test_block(&series, config.test_years).map_err(fail("split"))?;
    let (completed, imputation) = cached(cache, id, "impute", &key, || {
        mice_impute(
            &CovariateMatrix::from_series(&series),
            &config.impute_config_for(id),
        )
    })
    .map_err(fail("impute"))?;
    let frame = ForecastFrame::new(&split, &completed).map_err(fail("frame"))?;
    Ok(PreparedLake {
        series,
        split,
        missingness,
        completed,
        imputation,
        frame,
        key,
    })
}

fn first_pass(
    series: LakeSeries,
    config: &RunConfig,
    cache: Option<&StageCache>,
) -> Result<FirstPass, StageFailure> {
    let prepared = prepare_lake(series, config, cache)?;
    let id = prepared.series.lake_id;
    let key = prepared.key.as_str();
    let frame = &prepared.frame;
    let reference = cached(cache, id, "reference", key, || {
        frame.reference_fit(config.penalty)
    })
    .map_err(fail("reference"))?;
    let curve = cached(cache, id, "curve", key, || {
        sample_curve(frame, &config.grid, config.tolerance, config.penalty)
    })
    .map_err(fail("sample_curve"))?
    .rethreshold(config.tolerance);

    let forest = config.forest_config_for(id);
    let ranking = cached(cache, id, "ranking", key, || rank_features(frame, &forest))
        .map_err(fail("feature_rank"))?;
    let selection = cached(cache, id, "selection", key, || {
        forward_selection(frame, &ranking, config.tolerance, config.penalty)
    })
    .map_err(fail("feature_select"))?;
    let selection =
        SelectionResult::from_points(selection.nmae_by_k, &ranking.order, config.tolerance);

    Ok(FirstPass {
        prepared,
        reference,
        curve,
        ranking,
        selection,
    })
}

fn joint_pass(
    pass: &FirstPass,
    ranking: &FeatureRanking,
    config: &RunConfig,
    cache: Option<&StageCache>,
) -> Result<(FeasibilityGrid, MinimalConfig), StageFailure> {
    let id = pass.prepared.series.lake_id;
    let key =
        sha256_hex(format!("{}:{}", pass.prepared.key, ranking.order.join("\u{1f}")).as_bytes());
    let grid = cached(cache, id, "grid", &key[..32], || {
        feasibility_grid(
            &pass.prepared.frame,
            ranking,
            &config.grid,
            config.tolerance,
            config.penalty,
        )
    })
    .map_err(fail("joint"))?
    .rethreshold(config.tolerance);
    let chosen = minimal_config(&grid, id);
    Ok((grid, chosen))
}

/// Run every stage on every lake. Lakes that fail a stage are recorded and
/// skipped; only an invalid config is an error.
pub fn run_pipeline(
    lakes: &[LakeSeries],
    config: &RunConfig,
    cache: Option<&StageCache>,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    match config.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            pool.install(|| run_inner(lakes, config, cache))
        }
        None => run_inner(lakes, config, cache),
    }
}

fn run_inner(
    lakes: &[LakeSeries],
    config: &RunConfig,
    cache: Option<&StageCache>,
) -> Result<PipelineOutput, PipelineError> {
    let mut prepared: Vec<LakeSeries> = if config.apply_exclusions {
        lakes.iter().map(apply_exclusions).collect()
    } else {
        lakes.to_vec()
    };
    if let Some(k) = config.top_lakes {
        let keep = select_top_lakes(&prepared, k.min(prepared.len()))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        prepared.retain(|s| keep.contains(&s.lake_id));
    }
    info!(lakes = prepared.len(), "running pipeline");

    let first: Vec<(u32, String, Result<FirstPass, StageFailure>)> = prepared
        .into_par_iter()
        .map(|s| (s.lake_id, s.lake_name.clone(), first_pass(s, config, cache)))
        .collect();

    let mut failures = Vec::new();
    let mut passes = Vec::new();
    for (lake_id, lake_name, r) in first {
        match r {
            Ok(p) => passes.push(p),
            Err(f) => {
                warn!(lake_id, stage = f.stage, error = %f.message, "lake skipped");
                failures.push(LakeFailure {
                    lake_id,
                    lake_name,
                    stage: f.stage.into(),
                    message: f.message,
                });
            }
        }
    }

    let rankings: Vec<FeatureRanking> = passes.iter().map(|p| p.ranking.clone()).collect();
    let global = aggregate_ranking(&rankings).ok();

    let joint: Vec<Result<(FeasibilityGrid, MinimalConfig), StageFailure>> = passes
        .par_iter()
        .map(|p| {
            let ranking = match (&global, config.global_ranking) {
                (Some(g), true) => g,
                _ => &p.ranking,
            };
            joint_pass(p, ranking, config, cache)
        })
        .collect();

    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for (p, j) in passes.into_iter().zip(joint) {
        let (grid, chosen) = match j {
            Ok(v) => v,
            Err(f) => {
                failures.push(LakeFailure {
                    lake_id: p.prepared.series.lake_id,
                    lake_name: p.prepared.series.lake_name.clone(),
                    stage: f.stage.into(),
                    message: f.message,
                });
                continue;
            }
        };
        let lake = p.prepared;
        reports.push(LakeReport {
            lake_id: lake.series.lake_id,
            lake_name: lake.series.lake_name.clone(),
            n_records: lake.series.len(),
            n_pre: lake.split.n_pre(),
            n_test: lake.split.n_test(),
            test_boundary: lake.split.boundary,
            missingness: lake.missingness,
            imputation: lake.imputation,
            reference: p.reference,
            sample_curve: p.curve,
            ranking: p.ranking,
            selection: p.selection,
            minimal_config: chosen,
        });
        artifacts.push(LakeArtifacts {
            lake_id: lake.series.lake_id,
            series: lake.series,
            completed: lake.completed,
            grid,
        });
    }
    failures.sort_by_key(|f| f.lake_id);

    let configs: Vec<MinimalConfig> = reports.iter().map(|r| r.minimal_config.clone()).collect();
    let joint_summary = aggregate_configs(&configs, config.exclude_fallback).ok();
    let n_stars: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.sample_curve.n_star)
        .map(|n| n as f64)
        .collect();
    let mean_n_star =
        (!n_stars.is_empty()).then(|| n_stars.iter().sum::<f64>() / n_stars.len() as f64);

    let bundle = ReportBundle {
        config_hash: config.hash(),
        config: config.clone(),
        train_test: train_test_table(&reports),
        lakes_without_n_star: reports.len() - n_stars.len(),
        aggregate_ranking: global,
        joint_summary,
        mean_n_star,
        lakes: reports,
        failures,
    };
    Ok(PipelineOutput { bundle, artifacts })
}

/// Completed covariates next to the observed SDD, one row per record, with
/// the number of imputed cells in that row.
pub fn write_completed_csv<W: Write>(
    writer: W,
    series: &LakeSeries,
    completed: &CompletedMatrix,
) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["midas".to_string(), "date".into(), "zS_m".into()];
    header.extend(completed.feature_schema.iter().cloned());
    header.push("n_imputed".into());
    wtr.write_record(&header)?;
    for (i, r) in series.records.iter().enumerate() {
        let mut row = vec![
            r.lake_id.to_string(),
            r.date.to_string(),
            r.sdd.map_or_else(|| "NA".into(), |v| v.to_string()),
        ];
        row.extend(completed.values.row(i).iter().map(|v| v.to_string()));
        row.push(
            completed
                .imputed_mask
                .row(i)
                .iter()
                .filter(|&&m| m)
                .count()
                .to_string(),
        );
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
