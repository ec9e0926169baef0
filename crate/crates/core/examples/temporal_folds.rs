//! Builds a rolling temporal fold plan for one agency, verifies it has no
//! look-ahead and shows the row counts of each split.
//!
//! cargo run --example temporal_folds

use creditkit::folds::{check_leakage, materialize_fold, plan_folds, PeriodIndex, TemporalFold, TemporalFoldPlan};
use creditkit::ingest::{bind_schema, Agency};
use creditkit::synthetic::{default_schema, generate_table, SyntheticSpec};

fn main() -> creditkit::Result<()> {
    let table = generate_table(&SyntheticSpec {
        n_years: 8,
        ..SyntheticSpec::default()
    })?;
    let obs = bind_schema(&table, &default_schema())?.filter_agency(Agency::StandardAndPoors);
    let index = PeriodIndex::from_observations(&obs);
    println!("periods: {:?}", index.periods());

    let plan = plan_folds(&index, 4)?;
    println!("final holdout period: {}", plan.final_holdout);
    for fold in &plan.folds {
        let rows = materialize_fold(fold, &index, &obs, false)?;
        // with firm-disjoint splits a late fold can run out of unseen firms
        let strict = match materialize_fold(fold, &index, &obs, true) {
            Ok(r) => format!("{:?}", r.counts()),
            Err(e) => format!("unavailable: {e}"),
        };
        println!(
            "fold {}: train {:?} -> val {} -> test {}  rows {:?} (firm-disjoint {})",
            fold.id,
            fold.train_periods,
            fold.val_period,
            fold.test_period,
            rows.counts(),
            strict
        );
    }
    println!("leakage check on the plan: passed = {}", check_leakage(&plan, &index).passed());

    // a deliberately broken plan: training sees the test year
    let last = *index.periods().last().expect("periods");
    let bad = TemporalFoldPlan {
        folds: vec![TemporalFold {
            id: 1,
            train_periods: vec![index.periods()[0], last],
            val_period: last - 1,
            test_period: last,
        }],
        final_holdout: last,
    };
    let report = check_leakage(&bad, &index);
    println!("leakage check on a broken plan: passed = {}", report.passed());
    for v in &report.violations {
        println!("  {v:?}");
    }
    Ok(())
}
