//! The pipeline's building blocks, usable one at a time (the CLI's
//! single-stage subcommands run them directly).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{
    aggregate_importance, partial_dependence, permutation_importance, quantile_grid, weighted_shap, ImportanceRanking,
    Metric, PdpCurve, PermutationImportance, ShapMatrix, WeightedEnsemble,
};
use crate::folds::{check_leakage, materialize_fold, plan_folds, FoldRows, PeriodIndex, TemporalFold, TemporalFoldPlan};
use crate::gbdt::{fit, loss_value, GbdtConfig, GbdtModel, GrowthMode, Loss};
use crate::ingest::{Agency, ObservationSet};
use crate::matrix::FeatureMatrix;
use crate::metrics::{
    auc, bootstrap_auc, bootstrap_rmse, calibration_curve, classification_metrics, delong_test, psi_report,
    regression_metrics, roc_curve, BootstrapCI, CalibrationBin, DeLongResult, PsiReport, RocPoint,
};
use crate::preprocess::{deduplicate, derive_features, AuditLog, FittedPreprocessor, Preprocessor};
use crate::stats::derive_seed;
use crate::targets::{rank_rescale, TargetMode};
use crate::tune::{
    apply_params, fit_isotonic, fit_logistic_calibration, optimize_weights, optimize_weights_rmse, run_study,
    EnsembleWeights, Params, SearchSpace, StudyState,
};

use super::config::RunConfig;
use super::manifest::{CalibrationRecord, MetricSummary};

/// Failure of one pipeline stage; aborts the agency run that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> StageResult<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub fn target_slug(t: TargetMode) -> &'static str {
    match t {
        TargetMode::Binary => "binary",
        TargetMode::Continuous => "continuous",
    }
}

pub fn loss_for(t: TargetMode) -> Loss {
    match t {
        TargetMode::Binary => Loss::LogLoss,
        TargetMode::Continuous => Loss::SquaredError,
    }
}

/// One agency's cleaned observations, targets and fold plan.
#[derive(Debug, Clone)]
pub struct AgencyData {
    pub agency: Agency,
    pub target: TargetMode,
    pub n_observations: usize,
    pub n_after_dedup: usize,
    pub n_unknown_grade: usize,
    pub audit: AuditLog,
    pub derived_features: Vec<String>,
    /// Deduplicated, derived, known-grade rows.
    pub data: ObservationSet,
    /// Investment grade (1) or not, per row of `data`.
    pub binary: Vec<u8>,
    /// Training target per row of `data` (the binary label as 0/1 in binary
    /// mode).
    pub response: Vec<f64>,
    pub index: PeriodIndex,
    pub plan: TemporalFoldPlan,
}

/// Dedup → derive → targets → fold plan (with the leakage check) for the
/// rows of one agency.
pub fn prepare_agency(
    config: &RunConfig,
    raw: &ObservationSet,
    agency: Agency,
    target: TargetMode,
) -> StageResult<AgencyData> {
    let slug = agency.slug();
    let own = raw.filter_agency(agency);
    if own.is_empty() {
        return Err(StageError {
            stage: "ingest",
            error: Error::InvalidInput(format!("no rows for {}", agency.display_name())),
        });
    }
    let (deduped, audit) = deduplicate(&own);
    let (derived, dlog) = derive_features(&deduped);

    let scale = config.schema().stage("targets")?.scale();
    let known: Vec<usize> = (0..derived.len()).filter(|&i| derived.records[i].rating_known).collect();
    let n_unknown_grade = derived.len() - known.len();
    if n_unknown_grade > 0 {
        log::warn!("{slug}: {n_unknown_grade} rows with grades outside the scale excluded");
    }
    let data = derived.subset(&known);
    if data.is_empty() {
        return Err(StageError {
            stage: "targets",
            error: Error::InvalidInput("no rows with a known grade".into()),
        });
    }
    let binary = data
        .records
        .iter()
        .map(|r| scale.to_binary(&r.rating))
        .collect::<Result<Vec<u8>>>()
        .stage("targets")?;
    let mut response = match target {
        TargetMode::Binary => binary.iter().map(|&b| f64::from(b)).collect(),
        TargetMode::Continuous => data
            .records
            .iter()
            .map(|r| scale.to_continuous(&r.rating))
            .collect::<Result<Vec<f64>>>()
            .stage("targets")?,
    };
    if target == TargetMode::Continuous && config.rank_rescale {
        response = rank_rescale(&response);
    }

    let index = PeriodIndex::from_observations(&data);
    let k = config.folds.min(index.len().saturating_sub(2)).max(1);
    if k < config.folds {
        log::warn!("{slug}: only {} periods, using {k} folds instead of {}", index.len(), config.folds);
    }
    let plan = plan_folds(&index, k).stage("folds")?;
    let leakage = check_leakage(&plan, &index);
    if !leakage.passed() {
        let msg = leakage.violations.iter().map(|v| v.message.clone()).collect::<Vec<_>>().join("; ");
        return Err(StageError {
            stage: "folds",
            error: Error::InvalidInput(format!("leakage check failed: {msg}")),
        });
    }
    Ok(AgencyData {
        agency,
        target,
        n_observations: own.len(),
        n_after_dedup: deduped.len(),
        n_unknown_grade,
        audit,
        derived_features: dlog.applied,
        data,
        binary,
        response,
        index,
        plan,
    })
}

/// A fold with its preprocessor fitted on the training rows and all three
/// splits transformed.
#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub fold: TemporalFold,
    pub rows: FoldRows,
    pub preprocessor: FittedPreprocessor,
    pub audit: AuditLog,
    pub x_train: FeatureMatrix,
    pub x_val: FeatureMatrix,
    pub x_test: FeatureMatrix,
    pub bin_train: Vec<u8>,
    pub bin_val: Vec<u8>,
    pub bin_test: Vec<u8>,
    pub y_train: Vec<f64>,
    pub y_val: Vec<f64>,
    pub y_test: Vec<f64>,
}

impl AgencyData {
    pub fn slug(&self) -> &'static str {
        self.agency.slug()
    }

    /// The fold whose test period is the final holdout.
    pub fn holdout_fold(&self) -> &TemporalFold {
        self.plan.folds.last().expect("plans have at least one fold")
    }

    /// Provenance label of a fold's preprocessor, part of its state hash.
    pub fn fold_label(&self, fold: &TemporalFold) -> String {
        format!("{}/{}/fold{}", self.slug(), target_slug(self.target), fold.id)
    }

    fn pick(&self, rows: &[usize]) -> (Vec<u8>, Vec<f64>) {
        (
            rows.iter().map(|&i| self.binary[i]).collect(),
            rows.iter().map(|&i| self.response[i]).collect(),
        )
    }

    pub fn prepare_fold(&self, config: &RunConfig, fold: &TemporalFold) -> StageResult<PreparedFold> {
        let rows = materialize_fold(fold, &self.index, &self.data, config.firm_disjoint).stage("folds")?;
        // preprocessing statistics come from the training rows only
        let train_obs = self.data.subset(&rows.train);
        let (bin_train, y_train) = self.pick(&rows.train);
        let (bin_val, y_val) = self.pick(&rows.val);
        let (bin_test, y_test) = self.pick(&rows.test);
        let (preprocessor, audit) = Preprocessor::new(config.preprocess.clone())
            .fold_id(self.fold_label(fold))
            .fit(&train_obs, Some(&bin_train))
            .stage("preprocess")?;
        let x_train = preprocessor.apply(&train_obs).stage("preprocess")?;
        let x_val = preprocessor.apply(&self.data.subset(&rows.val)).stage("preprocess")?;
        let x_test = preprocessor.apply(&self.data.subset(&rows.test)).stage("preprocess")?;
        Ok(PreparedFold {
            fold: fold.clone(),
            rows,
            preprocessor,
            audit,
            x_train,
            x_val,
            x_test,
            bin_train,
            bin_val,
            bin_test,
            y_train,
            y_val,
            y_test,
        })
    }
}

/// Outcome of one preset's hyperparameter study.
#[derive(Debug, Clone)]
pub struct TunedPreset {
    pub preset: GrowthMode,
    pub best_params: Params,
    /// Validation cross-entropy (binary) or RMSE (continuous).
    pub best_value: f64,
    pub study: StudyState,
    /// The model trained in the best trial.
    pub model: GbdtModel,
}

fn base_config(config: &RunConfig, preset: GrowthMode, loss: Loss) -> GbdtConfig {
    GbdtConfig {
        iterations: config.base_iterations,
        early_stopping_rounds: config.early_stopping_rounds,
        histogram_bins: config.histogram_bins,
        ..GbdtConfig::preset(preset, loss)
    }
}

/// Validation objective of a study: mean cross-entropy or RMSE.
pub fn objective_value(loss: Loss, y: &[f64], raw: &[f64]) -> f64 {
    match loss {
        Loss::LogLoss => y.iter().zip(raw).map(|(&t, &f)| loss_value(loss, t, f)).sum::<f64>() / y.len() as f64,
        Loss::SquaredError => (y.iter().zip(raw).map(|(t, f)| (t - f).powi(2)).sum::<f64>() / y.len() as f64).sqrt(),
    }
}

/// One TPE study per configured preset, each trial trained on the fold's
/// training split and scored on its validation split.
pub fn tune_presets(config: &RunConfig, agency: &AgencyData, fold: &PreparedFold) -> StageResult<Vec<TunedPreset>> {
    let slug = agency.slug();
    let tslug = target_slug(agency.target);
    let fid = fold.fold.id.to_string();
    let loss = loss_for(agency.target);
    let mut out = Vec::new();
    for &preset in &config.presets {
        let space = SearchSpace::for_preset(preset);
        let base = base_config(config, preset, loss);
        let tpe_seed = derive_seed(config.seed, &["tpe", slug, tslug, &fid, preset.name()]);
        let mut best: Option<(f64, GbdtModel)> = None;
        let mut trial = 0usize;
        let (best_params, study) = run_study(
            |p| {
                let mut cfg = apply_params(&base, p)?;
                if let Some(cap) = config.iteration_cap {
                    cfg.iterations = cfg.iterations.min(cap);
                }
                cfg.seed = derive_seed(config.seed, &["gbdt", slug, tslug, &fid, preset.name(), &trial.to_string()]);
                trial += 1;
                let (model, _) = fit(&fold.x_train, &fold.y_train, &cfg, Some((&fold.x_val, &fold.y_val)))?;
                let value = objective_value(loss, &fold.y_val, &model.predict_raw(&fold.x_val)?);
                // ties keep the earliest trial, as the study does
                if value.is_finite() && best.as_ref().is_none_or(|(b, _)| value < *b) {
                    best = Some((value, model));
                }
                Ok(value)
            },
            &space,
            config.trials,
            tpe_seed,
        )
        .stage("tune")?;
        let (best_value, model) = best.expect("a completed trial exists when the study succeeds");
        out.push(TunedPreset {
            preset,
            best_params,
            best_value,
            study,
            model,
        });
    }
    Ok(out)
}

/// Everything needed to score new rows: the fold's preprocessor, the member
/// models, their weights and the calibration map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub agency: Agency,
    pub target: TargetMode,
    pub fold: TemporalFold,
    pub preprocessor: FittedPreprocessor,
    pub presets: Vec<GrowthMode>,
    pub members: Vec<GbdtModel>,
    pub weights: EnsembleWeights,
    pub calibration: CalibrationRecord,
}

impl ModelBundle {
    pub fn ensemble(&self) -> Result<WeightedEnsemble> {
        WeightedEnsemble::new(self.members.clone(), self.weights.weights.clone())
    }

    /// Per-member responses (probabilities or values).
    pub fn member_predictions(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.members.iter().map(|m| m.predict_response(x)).collect()
    }

    /// Weighted ensemble response.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.weights.combine(&self.member_predictions(x)?))
    }

    /// Calibrated probabilities: of investment grade (binary mode, isotonic)
    /// or of default (continuous mode, logistic).
    pub fn calibrate(&self, scores: &[f64]) -> Vec<f64> {
        match &self.calibration {
            CalibrationRecord::Isotonic(m) => m.apply_all(scores),
            CalibrationRecord::Logistic(c) => c.apply_all(scores),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Ensemble weights and calibration, both fitted on the validation split.
pub fn fit_ensemble(agency: &AgencyData, fold: &PreparedFold, tuned: &[TunedPreset]) -> StageResult<ModelBundle> {
    let members: Vec<GbdtModel> = tuned.iter().map(|t| t.model.clone()).collect();
    let val_preds = members
        .iter()
        .map(|m| m.predict_response(&fold.x_val))
        .collect::<Result<Vec<_>>>()
        .stage("ensemble")?;
    let weights = match agency.target {
        TargetMode::Binary => optimize_weights(&val_preds, &fold.bin_val),
        TargetMode::Continuous => optimize_weights_rmse(&val_preds, &fold.y_val),
    }
    .stage("ensemble")?;
    let ens_val = weights.combine(&val_preds);
    let calibration = match agency.target {
        TargetMode::Binary => CalibrationRecord::Isotonic(fit_isotonic(&ens_val, &fold.bin_val).stage("calibrate")?),
        TargetMode::Continuous => {
            // the default label is the complement of investment grade
            let defaults: Vec<u8> = fold.bin_val.iter().map(|&b| 1 - b).collect();
            CalibrationRecord::Logistic(fit_logistic_calibration(&ens_val, &defaults).stage("calibrate")?)
        }
    };
    Ok(ModelBundle {
        agency: agency.agency,
        target: agency.target,
        fold: fold.fold.clone(),
        preprocessor: fold.preprocessor.clone(),
        presets: tuned.iter().map(|t| t.preset).collect(),
        members,
        weights,
        calibration,
    })
}

pub fn summarize(target: TargetMode, labels: &[u8], y: &[f64], pred: &[f64], threshold: f64) -> Result<MetricSummary> {
    match target {
        TargetMode::Binary => Ok(MetricSummary::from_classification(
            labels.len(),
            &classification_metrics(labels, pred, threshold)?,
        )),
        TargetMode::Continuous => Ok(MetricSummary::from_regression(y.len(), &regression_metrics(y, pred)?)),
    }
}

/// Evenly spaced row subset of at most `cap` rows.
pub fn spread_rows(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// Scores and metrics of a fitted bundle on its fold.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub train: MetricSummary,
    pub val: MetricSummary,
    pub test: MetricSummary,
    /// Brier score of the calibrated test probabilities (binary mode).
    pub test_brier_calibrated: Option<f64>,
    pub test_ci: Option<BootstrapCI>,
    pub delong_vs_best_member: Option<DeLongResult>,
    /// Ensemble test response.
    pub test_scores: Vec<f64>,
    /// Calibrated test probabilities.
    pub test_calibrated: Vec<f64>,
}

/// Train/validation/test metrics of the ensemble, with the bootstrap
/// interval and the DeLong comparison against the member with the best
/// validation objective.
pub fn evaluate(config: &RunConfig, agency: &AgencyData, fold: &PreparedFold, bundle: &ModelBundle) -> StageResult<Evaluation> {
    let slug = agency.slug();
    let tslug = target_slug(agency.target);
    let fid = fold.fold.id.to_string();
    let target = agency.target;
    let ens_train = bundle.predict(&fold.x_train).stage("evaluate")?;
    let ens_val = bundle.predict(&fold.x_val).stage("evaluate")?;
    let test_preds = bundle.member_predictions(&fold.x_test).stage("evaluate")?;
    let ens_test = bundle.weights.combine(&test_preds);
    let test_calibrated = bundle.calibrate(&ens_test);

    let train = summarize(target, &fold.bin_train, &fold.y_train, &ens_train, config.threshold).stage("evaluate")?;
    let val = summarize(target, &fold.bin_val, &fold.y_val, &ens_val, config.threshold).stage("evaluate")?;
    let mut test = summarize(target, &fold.bin_test, &fold.y_test, &ens_test, config.threshold).stage("evaluate")?;
    let ci_seed = derive_seed(config.seed, &["bootstrap", slug, tslug, &fid]);
    let (test_brier_calibrated, test_ci, delong_vs_best_member) = match target {
        TargetMode::Binary => {
            let brier = test_calibrated
                .iter()
                .zip(&fold.bin_test)
                .map(|(p, &y)| (p - f64::from(y)).powi(2))
                .sum::<f64>()
                / fold.bin_test.len() as f64;
            let ci = (config.bootstrap_resamples > 0)
                .then(|| bootstrap_auc(&fold.bin_test, &ens_test, config.bootstrap_resamples, ci_seed))
                .transpose()
                .unwrap_or_else(|e| {
                    log::warn!("{slug}/{tslug} fold {fid}: no AUC interval: {e}");
                    None
                });
            let loss = loss_for(target);
            let mut best_member = 0;
            let mut best_value = f64::INFINITY;
            for (i, m) in bundle.members.iter().enumerate() {
                let v = objective_value(loss, &fold.y_val, &m.predict_raw(&fold.x_val).stage("evaluate")?);
                if v < best_value {
                    best_member = i;
                    best_value = v;
                }
            }
            // a zero-variance difference gives an infinite z, which JSON cannot carry
            let delong = delong_test(&fold.bin_test, &ens_test, &test_preds[best_member])
                .ok()
                .filter(|d| d.z.is_finite());
            (Some(brier), ci, delong)
        }
        TargetMode::Continuous => {
            let defaults: Vec<u8> = fold.bin_test.iter().map(|&b| 1 - b).collect();
            test.pd_auc = auc(&defaults, &test_calibrated).ok();
            let ci = (config.bootstrap_resamples > 0)
                .then(|| bootstrap_rmse(&fold.y_test, &ens_test, config.bootstrap_resamples, ci_seed))
                .transpose()
                .unwrap_or_else(|e| {
                    log::warn!("{slug}/{tslug} fold {fid}: no RMSE interval: {e}");
                    None
                });
            (None, ci, None)
        }
    };
    Ok(Evaluation {
        train,
        val,
        test,
        test_brier_calibrated,
        test_ci,
        delong_vs_best_member,
        test_scores: ens_test,
        test_calibrated,
    })
}

/// Test-split predictions as CSV: row id, label, target, score, calibrated.
pub fn predictions_csv(fold: &PreparedFold, eval: &Evaluation) -> Result<Vec<u8>> {
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["row_id", "label", "target", "score", "calibrated"])?;
    for i in 0..fold.x_test.n_rows() {
        csv.write_record([
            fold.x_test.row_keys[i].id(),
            fold.bin_test[i].to_string(),
            fold.y_test[i].to_string(),
            eval.test_scores[i].to_string(),
            eval.test_calibrated[i].to_string(),
        ])?;
    }
    csv.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))
}

/// ROC and reliability curve of one fold's test predictions. Continuous mode
/// scores the calibrated default probability against the default label.
pub fn curves(
    config: &RunConfig,
    target: TargetMode,
    labels: &[u8],
    scores: &[f64],
    calibrated: &[f64],
) -> Result<(Vec<RocPoint>, Vec<CalibrationBin>)> {
    match target {
        TargetMode::Binary => Ok((
            roc_curve(labels, scores)?,
            calibration_curve(labels, calibrated, config.calibration_bins)?,
        )),
        TargetMode::Continuous => {
            let defaults: Vec<u8> = labels.iter().map(|&b| 1 - b).collect();
            Ok((
                roc_curve(&defaults, calibrated).unwrap_or_default(),
                calibration_curve(&defaults, calibrated, config.calibration_bins)?,
            ))
        }
    }
}

/// Mean |SHAP| of the ensemble over (a spread subset of) the test rows.
pub fn fold_shap_importance(config: &RunConfig, agency: &AgencyData, fold: &PreparedFold, bundle: &ModelBundle) -> Result<ImportanceRanking> {
    let rows = fold.x_test.select_rows(&spread_rows(fold.x_test.n_rows(), config.explain_max_rows));
    let shap = weighted_shap(&bundle.members, &bundle.weights.weights, &rows)?;
    let ranking = aggregate_importance(std::slice::from_ref(&shap))?;
    Ok(ImportanceRanking {
        provenance: vec![format!("{}: ensemble mean |shap| on test", agency.fold_label(&fold.fold))],
        ..ranking
    })
}

/// Explanations of a bundle on its fold's test split.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub shap: ShapMatrix,
    pub shap_ranking: ImportanceRanking,
    pub permutation: PermutationImportance,
    pub pdp: Vec<PdpCurve>,
}

/// SHAP matrix, permutation importance and partial dependence for the top
/// SHAP features.
pub fn explain_bundle(config: &RunConfig, agency: &AgencyData, fold: &PreparedFold, bundle: &ModelBundle) -> Result<Explanation> {
    let ens = bundle.ensemble()?;
    let rows = fold.x_test.select_rows(&spread_rows(fold.x_test.n_rows(), config.explain_max_rows));
    let shap = weighted_shap(&ens.members, &ens.weights, &rows)?;
    let shap_ranking = aggregate_importance(std::slice::from_ref(&shap))?;
    let metric = match agency.target {
        TargetMode::Binary => Metric::Auc,
        TargetMode::Continuous => Metric::Rmse,
    };
    let seed = derive_seed(config.seed, &["permutation", agency.slug(), target_slug(agency.target)]);
    let permutation = permutation_importance(&ens, &fold.x_test, &fold.y_test, metric, config.permutation_repeats.max(1), seed)?;
    let mut pdp = Vec::new();
    for feature in shap_ranking.top(config.pdp_features) {
        let grid = quantile_grid(&fold.x_test, feature, config.pdp_points)?;
        pdp.push(partial_dependence(&ens, feature, &grid, &fold.x_test)?);
    }
    Ok(Explanation {
        shap,
        shap_ranking,
        permutation,
        pdp,
    })
}

/// PSI of every feature between a fold's training and test splits.
pub fn drift(config: &RunConfig, fold: &PreparedFold) -> Result<PsiReport> {
    psi_report(&fold.x_train.column_names, &fold.x_train, &fold.x_test, config.psi_bins)
}
