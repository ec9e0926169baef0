//! Temporally validated corporate credit scoring: ingestion, leak-free
//! preprocessing, rolling temporal folds, a histogram gradient-boosting
//! engine, hyperparameter search and calibration, tree explanations,
//! evaluation statistics, a small vector store, and an experiment runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(a < b)` is the NaN-rejecting form

pub mod context_store;
pub mod error;
pub mod explain;
pub mod folds;
pub mod gbdt;
pub mod ingest;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod preprocess;
pub mod runner;
pub mod stats;
pub mod synthetic;
pub mod targets;
pub mod tune;

pub use error::{Error, Result};
