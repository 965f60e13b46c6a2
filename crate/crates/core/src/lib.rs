//! Remaining-useful-life estimation on non-equispaced time series with
//! causal GraphNets and Gamma-distributed predictive uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! - [`gradcore`]: tensors, a reverse-mode tape and parameter checkpoints
//! - [`graphnet`]: attributed graphs and GN blocks
//! - [`prob`]: the Gamma predictive distribution and NLL objective
//! - [`models`]: the GNN-tCNN model and the LSTM-tCNN baseline
//! - [`simdata`], [`bearings`]: run-to-failure datasets
//! - [`sampler`]: causal observation graphs for training and evaluation
//! - [`trainer`]: Adam, schedules, early stopping and evaluation reports

pub mod bearings;
pub mod dataset;
pub mod error;
pub mod gradcore;
pub mod graphnet;
pub mod models;
pub mod prob;
pub mod rng;
pub mod sampler;
pub mod simdata;
pub mod trainer;

pub use error::{Error, Result};
