use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::Result;
use crate::explain::merge_rankings;
use crate::ingest::{bind_schema, load_table, Agency, ObservationSet};
use crate::targets::TargetMode;

use super::config::RunConfig;
use super::manifest::*;
use super::steps::{self, target_slug, AgencyData, ModelBundle, PreparedFold, StageExt, StageResult};

/// Collects artifact paths (relative to the output directory) from parallel
/// workers; sorted before they enter the manifest.
struct Artifacts<'a> {
    root: &'a Path,
    written: Mutex<Vec<String>>,
}

impl Artifacts<'_> {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        crate::io::write_atomic(&self.root.join(rel), bytes)?;
        self.written.lock().expect("artifact list lock").push(rel.to_string());
        Ok(rel.to_string())
    }
}

struct Timings(Mutex<BTreeMap<String, f64>>);

impl Timings {
    fn record(&self, key: String, since: Instant) {
        self.0.lock().expect("timings lock").insert(key, since.elapsed().as_secs_f64());
    }
}

/// Ingests the configured file and runs every (agency, target) pipeline.
///
/// A failing agency is recorded with the stage and cause; the others still
/// run. Every random choice derives its seed from the master seed and the
/// (stage, agency, target, fold, preset, trial) path, so the manifest is a
/// pure function of configuration and data.
pub fn run_experiment(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let schema = config.schema()?;
    let table = load_table(&config.data_path, config.delimiter_byte())?;
    let obs = bind_schema(&table, &schema)?;
    for r in &obs.rejected {
        log::warn!("row {} rejected: {}", r.source_row, r.reason);
    }
    run_on_observations(config, obs, table.rows.len(), started)
}

/// As [`run_experiment`], for data already bound to a schema.
pub fn run_on_observations(
    config: &RunConfig,
    obs: ObservationSet,
    n_raw_rows: usize,
    started: Instant,
) -> Result<RunManifest> {
    config.validate()?;
    let agencies = config.agency_list()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let artifacts = Artifacts {
        root: &config.out_dir,
        written: Mutex::new(Vec::new()),
    };
    let timings = Timings(Mutex::new(BTreeMap::new()));
    timings.record("ingest".into(), started);

    let jobs: Vec<(Agency, TargetMode)> = agencies
        .iter()
        .flat_map(|&a| config.targets.iter().map(move |&t| (a, t)))
        .collect();
    let runs: Vec<AgencyRun> = jobs
        .par_iter()
        .map(|&(agency, target)| {
            let t0 = Instant::now();
            let subset = obs.filter_agency(agency);
            let outcome = if subset.is_empty() {
                log::warn!("{}: no data", agency.display_name());
                AgencyOutcome::NoData
            } else {
                match run_agency(config, &subset, agency, target, &artifacts, &timings) {
                    Ok(r) => AgencyOutcome::Completed(Box::new(r)),
                    Err(e) => {
                        log::error!(
                            "{} ({}) failed at stage {}: {}",
                            agency.display_name(),
                            target_slug(target),
                            e.stage,
                            e.error
                        );
                        AgencyOutcome::Failed {
                            stage: e.stage.to_string(),
                            error: e.error.to_string(),
                        }
                    }
                }
            };
            timings.record(format!("{}/{}", agency.slug(), target_slug(target)), t0);
            AgencyRun {
                agency,
                target,
                outcome,
            }
        })
        .collect();

    let mut written = artifacts.written.into_inner().expect("artifact list lock");
    written.push("manifest.json".into());
    written.sort();
    written.dedup();
    timings.record("total".into(), started);
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        dataset: DatasetInfo {
            path: config.data_path.display().to_string(),
            content_hash: obs.content_hash.clone(),
            n_rows: n_raw_rows,
            n_rejected: obs.rejected.len(),
            schema: config.schema()?,
        },
        runs,
        artifacts: written,
        timings: timings.0.into_inner().expect("timings lock"),
    };
    crate::io::write_string(&config.out_dir.join("manifest.json"), &manifest.to_json()?)?;
    Ok(manifest)
}

/// Per-fold outputs that feed the agency-level explain and drift stages.
struct FoldOutput {
    result: FoldResult,
    prepared: PreparedFold,
    bundle: ModelBundle,
    test_scores: Vec<f64>,
    test_calibrated: Vec<f64>,
}

fn run_agency(
    config: &RunConfig,
    raw: &ObservationSet,
    agency: Agency,
    target: TargetMode,
    artifacts: &Artifacts,
    timings: &Timings,
) -> StageResult<AgencyResult> {
    let slug = agency.slug();
    let tslug = target_slug(target);
    let prefix = format!("agencies/{slug}/{tslug}");

    let data = steps::prepare_agency(config, raw, agency, target)?;
    let mut stages: Vec<String> = ["dedup", "derive", "targets"].map(String::from).to_vec();
    let positive_rate = data.binary.iter().map(|&b| f64::from(b)).sum::<f64>() / data.binary.len().max(1) as f64;
    artifacts
        .write(&format!("{prefix}/fold_plan.json"), data.plan.to_json().stage("folds")?.as_bytes())
        .stage("folds")?;
    stages.push("folds".into());

    let t_folds = Instant::now();
    let outcomes: Vec<(usize, StageResult<FoldOutput>)> = data
        .plan
        .folds
        .par_iter()
        .map(|fold| (fold.id, run_fold(config, &data, fold, &prefix, artifacts)))
        .collect();
    timings.record(format!("{slug}/{tslug}/folds"), t_folds);

    let mut folds: Vec<FoldOutput> = Vec::new();
    let mut skipped_folds = Vec::new();
    let mut first_error = None;
    for (id, out) in outcomes {
        match out {
            Ok(f) => folds.push(f),
            Err(e) => {
                log::warn!("{slug}/{tslug}: fold {id} skipped at stage {}: {}", e.stage, e.error);
                skipped_folds.push((id, format!("{}: {}", e.stage, e.error)));
                first_error.get_or_insert(e);
            }
        }
    }
    if folds.is_empty() {
        return Err(first_error.expect("every fold failed, so one error exists"));
    }
    for s in ["preprocess", "tune", "ensemble", "calibrate", "evaluate"] {
        stages.push(s.into());
    }

    let fold_mean_train = MetricSummary::mean(&folds.iter().map(|f| &f.result.train).collect::<Vec<_>>());
    let fold_mean_test = MetricSummary::mean(&folds.iter().map(|f| &f.result.test).collect::<Vec<_>>());
    let last = folds.last().expect("non-empty");
    let is_holdout = last.result.fold.test_period == data.plan.final_holdout;
    let (holdout_train, holdout_test) = if is_holdout {
        (Some(last.result.train.clone()), Some(last.result.test.clone()))
    } else {
        log::warn!("{slug}/{tslug}: the holdout fold was skipped; no primary numbers");
        (None, None)
    };
    let (roc, calibration) = steps::curves(
        config,
        target,
        &last.prepared.bin_test,
        &last.test_scores,
        &last.test_calibrated,
    )
    .stage("evaluate")?;

    let t_explain = Instant::now();
    let explain = explain_stage(config, &data, &folds, &prefix, artifacts).stage("explain")?;
    timings.record(format!("{slug}/{tslug}/explain"), t_explain);
    stages.push("explain".into());

    let psi = steps::drift(config, &last.prepared).stage("drift")?;
    for f in &psi.flagged {
        log::warn!("{slug}/{tslug}: feature `{f}` drifted between train and test (PSI > 0.25)");
    }
    stages.push("drift".into());

    Ok(AgencyResult {
        n_observations: data.n_observations,
        n_unknown_grade: data.n_unknown_grade,
        n_after_dedup: data.n_after_dedup,
        exact_duplicates_removed: data.audit.exact_duplicates_removed.len(),
        near_duplicates_resolved: data.audit.near_duplicates_resolved.len(),
        derived_features: data.derived_features.clone(),
        positive_rate,
        plan: data.plan.clone(),
        skipped_folds,
        folds: folds.into_iter().map(|f| f.result).collect(),
        fold_mean_train,
        fold_mean_test,
        holdout_train,
        holdout_test,
        roc,
        calibration_curve: calibration,
        explain,
        psi,
        stages,
    })
}

fn run_fold(
    config: &RunConfig,
    data: &AgencyData,
    fold: &crate::folds::TemporalFold,
    prefix: &str,
    artifacts: &Artifacts,
) -> StageResult<FoldOutput> {
    let fold_dir = format!("{prefix}/fold{}", fold.id);
    let prepared = data.prepare_fold(config, fold)?;
    let preprocessor_file = artifacts
        .write(
            &format!("{fold_dir}/preprocessor.json"),
            prepared.preprocessor.to_json().stage("preprocess")?.as_bytes(),
        )
        .stage("preprocess")?;

    let tuned = steps::tune_presets(config, data, &prepared)?;
    let mut studies = Vec::new();
    for t in &tuned {
        let val_pred = t.model.predict_response(&prepared.x_val).stage("tune")?;
        let val_metrics =
            steps::summarize(data.target, &prepared.bin_val, &prepared.y_val, &val_pred, config.threshold)
                .unwrap_or_default();
        let model_file = artifacts
            .write(
                &format!("{fold_dir}/model_{}.json", t.preset.name()),
                t.model.to_json().stage("tune")?.as_bytes(),
            )
            .stage("tune")?;
        studies.push(PresetStudy {
            preset: t.preset,
            best_params: t.best_params.clone(),
            best_value: t.best_value,
            best_iteration: t.model.best_iteration,
            model_hash: t.model.model_hash(),
            model_file,
            study_hash: t.study.state_hash(),
            study: t.study.clone(),
            val_metrics,
        });
    }

    let bundle = steps::fit_ensemble(data, &prepared, &tuned)?;
    let eval = steps::evaluate(config, data, &prepared, &bundle)?;
    let predictions_file = artifacts
        .write(
            &format!("{fold_dir}/test_predictions.csv"),
            &steps::predictions_csv(&prepared, &eval).stage("evaluate")?,
        )
        .stage("evaluate")?;
    let shap_importance = steps::fold_shap_importance(config, data, &prepared, &bundle).stage("explain")?;

    Ok(FoldOutput {
        result: FoldResult {
            fold: fold.clone(),
            n_train: prepared.rows.train.len(),
            n_val: prepared.rows.val.len(),
            n_test: prepared.rows.test.len(),
            preprocessor_hash: prepared.preprocessor.state_hash(),
            preprocessor_file,
            features: prepared.x_train.column_names.clone(),
            dropped_features: prepared.audit.dropped_features.clone(),
            studies,
            ensemble: bundle.weights.clone(),
            calibration: bundle.calibration.clone(),
            train: eval.train,
            val: eval.val,
            test: eval.test,
            test_brier_calibrated: eval.test_brier_calibrated,
            test_ci: eval.test_ci,
            delong_vs_best_member: eval.delong_vs_best_member,
            predictions_file,
            shap_importance,
        },
        prepared,
        bundle,
        test_scores: eval.test_scores,
        test_calibrated: eval.test_calibrated,
    })
}

fn explain_stage(
    config: &RunConfig,
    data: &AgencyData,
    folds: &[FoldOutput],
    prefix: &str,
    artifacts: &Artifacts,
) -> Result<ExplainSummary> {
    let rankings: Vec<_> = folds.iter().map(|f| f.result.shap_importance.clone()).collect();
    let shap = merge_rankings(&rankings, &format!("{}/{}", data.slug(), target_slug(data.target)))?;
    let last = folds.last().expect("non-empty");
    let ex = steps::explain_bundle(config, data, &last.prepared, &last.bundle)?;
    let mut buf = Vec::new();
    ex.shap.write_delimited(&mut buf, b',')?;
    let shap_file = artifacts.write(&format!("{prefix}/shap_holdout.csv"), &buf)?;
    Ok(ExplainSummary {
        shap,
        permutation: ex.permutation.ranking,
        permutation_baseline: ex.permutation.baseline,
        pdp: ex.pdp,
        shap_file,
    })
}
