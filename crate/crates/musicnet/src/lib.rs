//! Multi-scale correlation modelling for irregularly sampled multivariate
//! time series: hierarchy construction, frequency-domain channel
//! correlations, a correlation-weighted time-attention encoder/decoder, and
//! training/evaluation pipelines for classification, interpolation, and
//! forecasting.

pub mod data;
pub mod error;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod train;
pub mod tensor;
pub mod multiscale;
pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
