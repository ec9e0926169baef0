//! Fits the leak-free preprocessor on one fold's training rows and shows
//! the per-feature decisions, the audit trail and the state hash.
//!
//! cargo run --example preprocess_fold

use creditkit::ingest::{bind_schema, Agency};
use creditkit::runner::steps::prepare_agency;
use creditkit::runner::RunConfig;
use creditkit::synthetic::{default_schema, generate_table, SyntheticSpec};
use creditkit::targets::TargetMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let obs = bind_schema(&generate_table(&SyntheticSpec::default())?, &default_schema())?;
    let config = RunConfig {
        folds: 3,
        ..RunConfig::default()
    };
    let agency = prepare_agency(&config, &obs, Agency::Moodys, TargetMode::Binary)?;
    println!(
        "{}: {} ratings, {} after deduplication, derived features {:?}",
        agency.agency.display_name(),
        agency.n_observations,
        agency.n_after_dedup,
        agency.derived_features
    );
    let fold = agency.prepare_fold(&config, agency.holdout_fold())?;
    let p = &fold.preprocessor;
    println!("fold {} train/val/test rows {:?}", fold.fold.id, fold.rows.counts());
    for t in &p.numeric {
        let log = t.scaling.as_ref().is_some_and(|s| s.log_applied);
        println!(
            "  {:<32} missing {:>5.1}%  log {:<5}  {:?}",
            t.feature,
            100.0 * t.missing_fraction,
            log,
            t.imputation
        );
    }
    for c in &p.categorical {
        println!("  {:<32} {:?}", c.feature, c.encoder);
    }
    println!("model columns: {:?}", fold.x_train.column_names);
    println!("state hash: {}", p.state_hash());
    println!(
        "audit: {} exact duplicates, {} near duplicates, dropped features {:?}",
        agency.audit.exact_duplicates_removed.len(),
        agency.audit.near_duplicates_resolved.len(),
        fold.audit.dropped_features
    );
    Ok(())
}
