//! Data-budget planning for lake clarity forecasts: how many recent samples
//! and how many covariates a ridge forecast of Secchi depth needs before more
//! of either stops paying off.

pub mod dataset;
pub mod evaluation;
pub mod imputation;
pub mod joint;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use dataset::{LakeSeries, Record, SplitSeries};
pub use evaluation::{EvalMetrics, ForecastFrame, GridSpec, SampleCurve};
pub use imputation::{CompletedMatrix, CovariateMatrix, ImputeConfig};
pub use joint::{FeasibilityGrid, JointSummary, MinimalConfig};
pub use selection::{FeatureRanking, SelectionResult};
