//! End-to-end experiments: configuration, the per-agency pipeline, the run
//! manifest and report emission.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! manifest.json
//! agencies/<agency>/<target>/fold_plan.json
//! agencies/<agency>/<target>/fold<k>/preprocessor.json
//! agencies/<agency>/<target>/fold<k>/model_<preset>.json
//! agencies/<agency>/<target>/fold<k>/test_predictions.csv
//! agencies/<agency>/<target>/shap_holdout.csv
//! reports/                      (written by emit_report)
//! ```

mod config;
mod manifest;
mod pipeline;
mod report;
pub mod steps;

pub use config::RunConfig;
pub use manifest::*;
pub use pipeline::{run_experiment, run_on_observations};
pub use report::{emit_report, AgencyStatus, ReportBundle, Table, TableRow};
