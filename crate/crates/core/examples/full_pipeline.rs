//! End-to-end run on a generated dataset: per-agency temporal folds,
//! tuning, ensembling, calibration, evaluation, explanation, drift and the
//! report tables.
//!
//! cargo run --release --example full_pipeline [-- output_dir]

use std::path::PathBuf;

use creditkit::runner::{emit_report, run_experiment, RunConfig};
use creditkit::synthetic::{write_csv, SyntheticSpec};
use creditkit::targets::TargetMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out_dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("out/example"), PathBuf::from);
    let data_path = out_dir.join("synthetic.csv");
    write_csv(&SyntheticSpec::default(), &data_path)?;

    let config = RunConfig {
        data_path,
        agencies: vec!["moodys".into(), "fitch".into()],
        targets: vec![TargetMode::Binary, TargetMode::Continuous],
        folds: 3,
        trials: 5,
        base_iterations: 150,
        iteration_cap: Some(150),
        bootstrap_resamples: 200,
        permutation_repeats: 2,
        explain_max_rows: 100,
        out_dir: out_dir.clone(),
        ..RunConfig::default()
    };
    let manifest = run_experiment(&config)?;
    let report = emit_report(&manifest, &out_dir)?;
    for t in [&report.classification_table, &report.regression_table].into_iter().flatten() {
        println!("{}", t.to_text());
    }
    if let Some(u) = &report.unified_importance {
        println!("top features: {:?}", u.top(6));
    }
    println!("{} report files under {}", report.files.len(), out_dir.join("reports").display());
    Ok(())
}
