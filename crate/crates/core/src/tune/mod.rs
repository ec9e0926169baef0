//! Hyperparameter search, ensemble weighting and calibration.

mod calibration;
mod ensemble;
mod tpe;

pub use calibration::{fit_isotonic, fit_logistic_calibration, pav, IsotonicMap, LogisticCalibration, MAX_SLOPE};
pub use ensemble::{
    combine, maximize_on_simplex, optimize_weights, optimize_weights_rmse, simplex_grid, EnsembleWeights,
    GRID_STEPS,
};
pub use tpe::{
    apply_params, run_study, suggest, Dimension, Params, Scale, SearchSpace, StudyState, Trial, TrialStatus,
};
