//! Fold plans never look ahead, materialized splits are disjoint and match
//! their periods, and firm-disjoint splits share no firms with training.

use chrono::Datelike;
use creditkit::folds::{check_leakage, materialize_fold, plan_folds, PeriodIndex};
use creditkit::ingest::{bind_schema, Agency, ObservationSet};
use creditkit::synthetic::{default_schema, generate_table, SyntheticSpec};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn observations(n_years: usize, seed: u64) -> ObservationSet {
    let spec = SyntheticSpec {
        n_firms: 60,
        n_years,
        agencies: vec![Agency::Fitch],
        rating_probability: 0.7,
        seed,
        ..SyntheticSpec::default()
    };
    bind_schema(&generate_table(&spec).unwrap(), &default_schema()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn plans_never_look_ahead(periods in proptest::collection::btree_set(1990i32..2030, 3..20), k in 1usize..20) {
        let labels: Vec<i32> = periods.iter().flat_map(|&p| [p, p]).collect();
        let index = PeriodIndex::from_labels(&labels);
        match plan_folds(&index, k) {
            Err(_) => prop_assert!(periods.len() < k + 2),
            Ok(plan) => {
                prop_assert_eq!(plan.folds.len(), k);
                prop_assert!(check_leakage(&plan, &index).passed());
                prop_assert_eq!(plan.final_holdout, *periods.iter().next_back().unwrap());
                prop_assert_eq!(plan.folds.last().unwrap().test_period, plan.final_holdout);
                for f in &plan.folds {
                    prop_assert!(f.train_periods.iter().all(|&t| t < f.val_period));
                    prop_assert!(f.val_period < f.test_period);
                    prop_assert!(f.train_periods.windows(2).all(|w| w[0] < w[1]));
                }
                for w in plan.folds.windows(2) {
                    prop_assert!(w[0].test_period < w[1].test_period);
                    prop_assert!(w[0].train_periods.len() < w[1].train_periods.len());
                }
            }
        }
    }
}

#[test]
fn materialized_splits_are_disjoint_and_period_pure() {
    let obs = observations(7, 3);
    let index = PeriodIndex::from_observations(&obs);
    let plan = plan_folds(&index, 3).unwrap();
    for fold in &plan.folds {
        let rows = materialize_fold(fold, &index, &obs, false).unwrap();
        let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
            rows.train.iter().copied().collect(),
            rows.val.iter().copied().collect(),
            rows.test.iter().copied().collect(),
        );
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let year = |i: usize| obs.records[i].period.year();
        assert!(rows.train.iter().all(|&i| fold.train_periods.contains(&year(i))));
        assert!(rows.val.iter().all(|&i| year(i) == fold.val_period));
        assert!(rows.test.iter().all(|&i| year(i) == fold.test_period));
        let expected: usize = fold.train_periods.iter().map(|&p| index.rows_of(p).len()).sum();
        assert_eq!(rows.train.len(), expected);
    }
}

#[test]
fn firm_disjoint_splits_share_no_firms_with_training() {
    // many firms, few ratings each, so unseen firms exist in later years
    let spec = SyntheticSpec {
        n_firms: 400,
        n_years: 6,
        agencies: vec![Agency::Moodys],
        rating_probability: 0.2,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let obs = bind_schema(&generate_table(&spec).unwrap(), &default_schema()).unwrap();
    let index = PeriodIndex::from_observations(&obs);
    let plan = plan_folds(&index, 2).unwrap();
    for fold in &plan.folds {
        let rows = materialize_fold(fold, &index, &obs, true).unwrap();
        let firms = |ix: &[usize]| ix.iter().map(|&i| obs.records[i].firm_id.clone()).collect::<BTreeSet<_>>();
        let train = firms(&rows.train);
        assert!(train.is_disjoint(&firms(&rows.val)));
        assert!(train.is_disjoint(&firms(&rows.test)));
    }
}
