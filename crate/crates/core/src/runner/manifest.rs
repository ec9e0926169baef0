use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{ImportanceRanking, PdpCurve};
use crate::folds::{TemporalFold, TemporalFoldPlan};
use crate::gbdt::GrowthMode;
use crate::ingest::Agency;
use crate::metrics::{BootstrapCI, CalibrationBin, ClassificationReport, DeLongResult, PsiReport, RegressionReport, RocPoint};
use crate::stats;
use crate::targets::TargetMode;
use crate::tune::{EnsembleWeights, IsotonicMap, LogisticCalibration, Params, StudyState};

use super::config::RunConfig;

pub const MANIFEST_VERSION: u32 = 1;

/// Headline numbers for one split; fields that do not apply are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub brier: Option<f64>,
    pub kappa: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    /// Continuous mode: AUC of the calibrated default probability against
    /// the default label.
    pub pd_auc: Option<f64>,
}

impl MetricSummary {
    pub fn from_classification(n: usize, r: &ClassificationReport) -> Self {
        Self {
            n,
            accuracy: Some(r.accuracy),
            precision: Some(r.precision),
            recall: Some(r.recall),
            f1: Some(r.f1),
            auc: Some(r.auc),
            brier: Some(r.brier),
            kappa: Some(r.kappa),
            ..Self::default()
        }
    }

    pub fn from_regression(n: usize, r: &RegressionReport) -> Self {
        Self {
            n,
            rmse: Some(r.rmse),
            mae: Some(r.mae),
            r2: r.r2,
            ..Self::default()
        }
    }

    /// `name=value` pairs for the fields that are present.
    pub fn to_compact_string(&self) -> String {
        let fields = [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("auc", self.auc),
            ("brier", self.brier),
            ("kappa", self.kappa),
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("r2", self.r2),
            ("pd_auc", self.pd_auc),
        ];
        let mut out = format!("n={}", self.n);
        for (name, v) in fields {
            if let Some(v) = v {
                out.push_str(&format!(" {name}={v:.4}"));
            }
        }
        out
    }

    /// Field-wise mean; a field is kept only when every input has it.
    pub fn mean(items: &[&MetricSummary]) -> MetricSummary {
        let avg = |f: fn(&MetricSummary) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = items.iter().map(|m| f(m)).collect();
            v.and_then(|v| stats::mean(&v))
        };
        MetricSummary {
            n: items.iter().map(|m| m.n).sum(),
            accuracy: avg(|m| m.accuracy),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
            auc: avg(|m| m.auc),
            brier: avg(|m| m.brier),
            kappa: avg(|m| m.kappa),
            rmse: avg(|m| m.rmse),
            mae: avg(|m| m.mae),
            r2: avg(|m| m.r2),
            pd_auc: avg(|m| m.pd_auc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetStudy {
    pub preset: GrowthMode,
    pub best_params: Params,
    /// Validation cross-entropy (binary) or RMSE (continuous).
    pub best_value: f64,
    pub best_iteration: usize,
    pub model_hash: String,
    pub model_file: String,
    pub study_hash: String,
    pub study: StudyState,
    pub val_metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationRecord {
    Isotonic(IsotonicMap),
    Logistic(LogisticCalibration),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: TemporalFold,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub preprocessor_hash: String,
    pub preprocessor_file: String,
    pub features: Vec<String>,
    pub dropped_features: Vec<(String, String)>,
    pub studies: Vec<PresetStudy>,
    pub ensemble: EnsembleWeights,
    pub calibration: CalibrationRecord,
    pub train: MetricSummary,
    pub val: MetricSummary,
    pub test: MetricSummary,
    /// Brier score of the calibrated test probabilities (binary mode).
    pub test_brier_calibrated: Option<f64>,
    /// Test AUC (binary) or RMSE (continuous) interval.
    pub test_ci: Option<BootstrapCI>,
    /// Ensemble versus its best single member on the test split.
    pub delong_vs_best_member: Option<DeLongResult>,
    pub predictions_file: String,
    pub shap_importance: ImportanceRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    /// Mean |SHAP| merged over folds.
    pub shap: ImportanceRanking,
    /// Final fold, test split.
    pub permutation: ImportanceRanking,
    pub permutation_baseline: f64,
    pub pdp: Vec<PdpCurve>,
    pub shap_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgencyResult {
    pub n_observations: usize,
    pub n_unknown_grade: usize,
    pub n_after_dedup: usize,
    pub exact_duplicates_removed: usize,
    pub near_duplicates_resolved: usize,
    pub derived_features: Vec<String>,
    pub positive_rate: f64,
    pub plan: TemporalFoldPlan,
    pub skipped_folds: Vec<(usize, String)>,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold test metrics.
    pub fold_mean_train: MetricSummary,
    pub fold_mean_test: MetricSummary,
    /// The fold whose test period is the final holdout; the primary numbers.
    pub holdout_train: Option<MetricSummary>,
    pub holdout_test: Option<MetricSummary>,
    pub roc: Vec<RocPoint>,
    pub calibration_curve: Vec<CalibrationBin>,
    pub explain: ExplainSummary,
    pub psi: PsiReport,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AgencyOutcome {
    Completed(Box<AgencyResult>),
    NoData,
    Failed { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgencyRun {
    pub agency: Agency,
    pub target: TargetMode,
    pub outcome: AgencyOutcome,
}

impl AgencyRun {
    pub fn result(&self) -> Option<&AgencyResult> {
        match &self.outcome {
            AgencyOutcome::Completed(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: String,
    pub content_hash: String,
    pub n_rows: usize,
    pub n_rejected: usize,
    pub schema: crate::ingest::SchemaMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub dataset: DatasetInfo,
    pub runs: Vec<AgencyRun>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage; excluded from `content_hash`.
    pub timings: BTreeMap<String, f64>,
}

/// Stages every completed agency run must record.
pub const REQUIRED_STAGES: [&str; 8] = [
    "dedup", "derive", "targets", "folds", "tune", "ensemble", "explain", "drift",
];

impl RunManifest {
    /// SHA-256 of the manifest with timings removed.
    pub fn content_hash(&self) -> String {
        let mut m = self.clone();
        m.timings.clear();
        stats::sha256_hex(&serde_json::to_vec(&m).expect("manifest serializes"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }

    pub fn run(&self, agency: Agency, target: TargetMode) -> Option<&AgencyRun> {
        self.runs.iter().find(|r| r.agency == agency && r.target == target)
    }

    /// Errors with the first missing stage of any completed run.
    pub fn check_complete(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::IncompleteManifest("no agency runs recorded".into()));
        }
        for r in &self.runs {
            if let AgencyOutcome::Completed(res) = &r.outcome {
                for s in REQUIRED_STAGES {
                    if !res.stages.iter().any(|x| x == s) {
                        return Err(Error::IncompleteManifest(format!(
                            "{} ({:?}) is missing stage `{s}`",
                            r.agency.slug(),
                            r.target
                        )));
                    }
                }
                if res.folds.is_empty() {
                    return Err(Error::IncompleteManifest(format!(
                        "{} ({:?}) has no evaluated folds",
                        r.agency.slug(),
                        r.target
                    )));
                }
            }
        }
        Ok(())
    }
}
