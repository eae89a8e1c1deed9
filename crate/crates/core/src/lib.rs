//! Spatio-temporal multivariate time-series forecasting with anomaly
//! detection embedded in the training loop.
//!
//! The crate is organised around the training pipeline:
//!
//! * [`data`]: panels, windows, synthetic benchmarks and fill strategies
//! * [`embedding`]: momentum temporal embeddings, GCN spatial embeddings and
//!   auxiliary-series selection
//! * [`model`]: the attention / transformer / LSTM forecaster with its
//!   predictor and reconstructor heads
//! * [`ead`]: residual ledger, dynamic thresholding and the alternating
//!   train/detect/fill loop
//! * [`baselines`]: two-stage 3σ and EWMA cleaners plus metrics
//! * [`config`], [`cli`]: run configuration and the command-line driver

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod ead;
pub mod embedding;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Result, SttsError};
pub use tensor::Matrix;
