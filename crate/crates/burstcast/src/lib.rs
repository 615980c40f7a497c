//! Forecasting pipeline for sparse, bursty spatio-temporal event-count panels.
//!
//! The pipeline decomposes each series' log-intensity into a global trend,
//! modelled by an attention-based quantile forecaster, and a local residual
//! surface, modelled by a nearest-neighbor variational Gaussian process that
//! is applied through a burst gate. Series that are almost entirely zero are
//! routed to a zero-inflated negative-binomial head instead. A rolling-origin
//! backtest harness, simulation generators, and a random-search tuner wrap
//! the model components.

pub mod autodiff;
pub mod backtest;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod forecaster;
pub mod hybrid;
pub mod metrics;
pub mod panel;
pub mod report;
pub mod sim;
pub mod tune;
pub mod vnngp;
pub mod zinb;

pub use error::{Error, Result};
