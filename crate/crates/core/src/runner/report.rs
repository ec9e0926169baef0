use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::explain::{merge_rankings, ranking_agreement, ImportanceRanking};
use crate::ingest::Agency;
use crate::metrics::PsiReport;
use crate::targets::TargetMode;

use super::manifest::{AgencyOutcome, MetricSummary, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub agency: String,
    pub values: Vec<Option<f64>>,
}

/// An agency × metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    fn cell(v: Option<f64>) -> String {
        v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.agency.len())
            .chain(std::iter::once("agency".len()))
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = write!(out, "{:>width$}", "agency");
        for c in &self.columns {
            let _ = write!(out, "  {c:>15}");
        }
        let _ = writeln!(out);
        for r in &self.rows {
            let _ = write!(out, "{:>width$}", r.agency);
            for v in &r.values {
                let _ = write!(out, "  {:>15}", Self::cell(*v));
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn to_delimited(&self, delimiter: u8) -> Result<String> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(Vec::new());
        let mut header = vec!["agency".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.agency.clone()];
            rec.extend(r.values.iter().map(|v| v.map_or_else(String::new, |x| x.to_string())));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgencyStatus {
    pub agency: String,
    pub target: TargetMode,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    /// Final-holdout numbers (primary).
    pub classification_table: Option<Table>,
    pub regression_table: Option<Table>,
    /// Means over the temporal folds.
    pub classification_fold_mean: Option<Table>,
    pub regression_fold_mean: Option<Table>,
    pub statuses: Vec<AgencyStatus>,
    pub notices: Vec<String>,
    /// Mean |SHAP| merged over every completed agency and target.
    pub unified_importance: Option<ImportanceRanking>,
    /// Spearman correlation of the classification and regression rankings.
    pub cross_task_agreement: Option<f64>,
    pub psi: Vec<(String, TargetMode, PsiReport)>,
    pub files: Vec<PathBuf>,
}

const CLASSIFICATION_COLUMNS: [&str; 4] = ["train_accuracy", "test_accuracy", "train_auc", "test_auc"];
const REGRESSION_COLUMNS: [&str; 4] = ["train_rmse", "test_rmse", "train_r2", "test_r2"];

type MetricColumns = fn(&MetricSummary, &MetricSummary) -> Vec<Option<f64>>;

fn table_for(
    manifest: &RunManifest,
    target: TargetMode,
    title: &str,
    pick: impl Fn(&super::manifest::AgencyResult) -> (Option<&MetricSummary>, Option<&MetricSummary>),
) -> Table {
    let (columns, values): (&[&str], MetricColumns) = match target {
        TargetMode::Binary => (&CLASSIFICATION_COLUMNS, |tr, te| vec![tr.accuracy, te.accuracy, tr.auc, te.auc]),
        TargetMode::Continuous => (&REGRESSION_COLUMNS, |tr, te| vec![tr.rmse, te.rmse, tr.r2, te.r2]),
    };
    let mut rows = Vec::new();
    for agency in Agency::ALL {
        let Some(run) = manifest.run(agency, target) else { continue };
        let vals = match run.result().map(&pick) {
            Some((Some(tr), Some(te))) => values(tr, te),
            _ => vec![None; columns.len()],
        };
        rows.push(TableRow {
            agency: agency.display_name().to_string(),
            values: vals,
        });
    }
    Table {
        title: title.to_string(),
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows,
    }
}

/// Writes the agency tables, metric JSON and plot-data files under
/// `<out_dir>/reports`.
pub fn emit_report(manifest: &RunManifest, out_dir: &Path) -> Result<ReportBundle> {
    manifest.check_complete()?;
    let dir = out_dir.join("reports");
    let mut files = Vec::new();
    let mut write = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        crate::io::write_string(&p, text)?;
        files.push(p);
        Ok(())
    };

    let has = |t: TargetMode| manifest.runs.iter().any(|r| r.target == t);
    let mut notices = Vec::new();
    let mut tables = Vec::new();
    let mut classification_table = None;
    let mut classification_fold_mean = None;
    let mut regression_table = None;
    let mut regression_fold_mean = None;
    for target in [TargetMode::Binary, TargetMode::Continuous] {
        let (name, label) = match target {
            TargetMode::Binary => ("classification", "Classification"),
            TargetMode::Continuous => ("regression", "Regression"),
        };
        if !has(target) {
            notices.push(format!("{label} table omitted: the run has no {name} target"));
            continue;
        }
        let holdout = table_for(manifest, target, &format!("{label} results (final holdout)"), |r| {
            (r.holdout_train.as_ref(), r.holdout_test.as_ref())
        });
        let mean = table_for(manifest, target, &format!("{label} results (mean over temporal folds)"), |r| {
            (Some(&r.fold_mean_train), Some(&r.fold_mean_test))
        });
        write(&format!("{name}_table.csv"), &holdout.to_delimited(b',')?)?;
        write(&format!("{name}_table_fold_mean.csv"), &mean.to_delimited(b',')?)?;
        tables.push(holdout.to_text());
        tables.push(mean.to_text());
        match target {
            TargetMode::Binary => {
                classification_table = Some(holdout);
                classification_fold_mean = Some(mean);
            }
            TargetMode::Continuous => {
                regression_table = Some(holdout);
                regression_fold_mean = Some(mean);
            }
        }
    }

    let mut statuses = Vec::new();
    let mut psi = Vec::new();
    let mut per_target: Vec<(TargetMode, ImportanceRanking)> = Vec::new();
    for run in &manifest.runs {
        let slug = run.agency.slug();
        let tslug = match run.target {
            TargetMode::Binary => "binary",
            TargetMode::Continuous => "continuous",
        };
        let status = match &run.outcome {
            AgencyOutcome::Completed(_) => "completed".to_string(),
            AgencyOutcome::NoData => {
                notices.push(format!("{}: no data", run.agency.display_name()));
                "no data".to_string()
            }
            AgencyOutcome::Failed { stage, error } => {
                notices.push(format!("{} ({tslug}) failed at {stage}: {error}", run.agency.display_name()));
                format!("failed at {stage}")
            }
        };
        statuses.push(AgencyStatus {
            agency: run.agency.display_name().to_string(),
            target: run.target,
            status,
        });
        let Some(res) = run.result() else { continue };
        per_target.push((run.target, res.explain.shap.clone()));
        psi.push((slug.to_string(), run.target, res.psi.clone()));

        let base = format!("{slug}_{tslug}");
        let mut roc = String::from("threshold,fpr,tpr\n");
        for p in &res.roc {
            let t = p.threshold.map_or_else(|| "inf".to_string(), |t| t.to_string());
            let _ = writeln!(roc, "{t},{},{}", p.fpr, p.tpr);
        }
        write(&format!("{base}_roc.csv"), &roc)?;
        let mut cal = String::from("lower,upper,mean_predicted,observed_rate,count\n");
        for b in &res.calibration_curve {
            let _ = writeln!(cal, "{},{},{},{},{}", b.lower, b.upper, b.mean_predicted, b.observed_rate, b.count);
        }
        write(&format!("{base}_calibration.csv"), &cal)?;
        let mut pdp = String::from("feature,grid,response\n");
        for c in &res.explain.pdp {
            for (g, r) in c.grid.iter().zip(&c.response) {
                let _ = writeln!(pdp, "\"{}\",{g},{r}", c.feature.replace('"', "\"\""));
            }
        }
        write(&format!("{base}_pdp.csv"), &pdp)?;
        let mut imp = String::from("feature,mean_abs_shap\n");
        for e in &res.explain.shap.entries {
            let _ = writeln!(imp, "\"{}\",{}", e.feature.replace('"', "\"\""), e.score);
        }
        write(&format!("{base}_importance.csv"), &imp)?;
        write(
            &format!("{base}_metrics.json"),
            &serde_json::to_string_pretty(&serde_json::json!({
                "agency": run.agency.display_name(),
                "target": run.target,
                "holdout_train": res.holdout_train,
                "holdout_test": res.holdout_test,
                "fold_mean_train": res.fold_mean_train,
                "fold_mean_test": res.fold_mean_test,
                "folds": res.folds.iter().map(|f| serde_json::json!({
                    "fold": f.fold.id,
                    "test_period": f.fold.test_period,
                    "train": f.train,
                    "test": f.test,
                    "test_ci": f.test_ci,
                    "ensemble_weights": f.ensemble.weights,
                    "delong_vs_best_member": f.delong_vs_best_member,
                })).collect::<Vec<_>>(),
                "psi_flagged": res.psi.flagged,
            }))?,
        )?;
    }

    let all: Vec<ImportanceRanking> = per_target.iter().map(|(_, r)| r.clone()).collect();
    let unified_importance = (!all.is_empty()).then(|| merge_rankings(&all, "all agencies and targets")).transpose()?;
    let by_target = |t: TargetMode| -> Result<Option<ImportanceRanking>> {
        let v: Vec<ImportanceRanking> = per_target.iter().filter(|(x, _)| *x == t).map(|(_, r)| r.clone()).collect();
        (!v.is_empty()).then(|| merge_rankings(&v, "per target")).transpose()
    };
    let cross_task_agreement = match (by_target(TargetMode::Binary)?, by_target(TargetMode::Continuous)?) {
        (Some(c), Some(r)) => {
            let rho = ranking_agreement(&c, &r);
            if rho.is_none() {
                notices.push("cross-task agreement undefined (constant importance scores)".into());
            }
            rho
        }
        _ => {
            notices.push("cross-task agreement needs both classification and regression runs".into());
            None
        }
    };

    let bundle = ReportBundle {
        classification_table,
        regression_table,
        classification_fold_mean,
        regression_fold_mean,
        statuses,
        notices,
        unified_importance,
        cross_task_agreement,
        psi,
        files: Vec::new(),
    };
    let mut summary = tables.join("\n");
    if let Some(u) = &bundle.unified_importance {
        let _ = writeln!(summary, "\nUnified importance (mean |SHAP|)");
        for (i, e) in u.entries.iter().take(15).enumerate() {
            let _ = writeln!(summary, "{:>3}. {:<40} {:.6}", i + 1, e.feature, e.score);
        }
    }
    if let Some(rho) = bundle.cross_task_agreement {
        let _ = writeln!(summary, "\nClassification/regression ranking agreement (Spearman): {rho:.4}");
    }
    for n in &bundle.notices {
        let _ = writeln!(summary, "note: {n}");
    }
    write("summary.txt", &summary)?;
    write("report.json", &serde_json::to_string_pretty(&bundle)?)?;
    Ok(ReportBundle { files, ..bundle })
}
