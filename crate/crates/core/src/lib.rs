//! Day-ahead electricity price forecasting toolbox.
//!
//! Models: a weekly naive benchmark, LEAR (24 LASSO-estimated hourly
//! autoregressions over a fixed 247-column layout), a feed-forward
//! multi-output network (DNN) with joint feature/hyperparameter search and
//! ensemble averaging, and a Gaussian distributional variant. Models are
//! evaluated by a leak-free rolling backtest with daily recalibration,
//! MAE / rMAE and Diebold-Mariano tests.
//!
//! The numeric engines ([`lasso`], [`neural`], [`metrics`]) are generic over
//! [`Scalar`] (`f32` / `f64`); the aliases below pin the double-precision
//! instantiations used by the models.

pub mod backtest;
pub mod dnn;
pub mod error;
pub mod features;
pub mod lasso;
pub mod lear;
pub mod market_data;
pub mod metrics;
pub mod neural;
pub mod scalar;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LassoConfig64 = lasso::LassoConfig<f64>;
pub type LassoFit64 = lasso::LassoFit<f64>;
pub type GramProblem64 = lasso::GramProblem<f64>;
pub type Network64 = neural::Network<f64>;
pub type Standardizer64 = features::Standardizer<f64>;

pub type LassoConfig32 = lasso::LassoConfig<f32>;
pub type LassoFit32 = lasso::LassoFit<f32>;
pub type GramProblem32 = lasso::GramProblem<f32>;
pub type Network32 = neural::Network<f32>;
pub type Standardizer32 = features::Standardizer<f32>;
