//! Forecasting and importance models.

pub mod forest;
pub mod ridge;

pub use forest::{fit_forest, mdi_importances, ForestConfig, ForestError, ForestModel};
pub use ridge::{fit_ridge, predict_ridge, RidgeError, RidgeModel};
