//! Rolling-origin temporal partitions: train on every period up to `t`,
//! validate on `t + 1`, test on `t + 2`. Periods are calendar years.

use std::collections::{BTreeMap, HashSet};

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ObservationSet;

/// Distinct calendar years present in the data, with the rows of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodIndex {
    periods: Vec<i32>,
    rows: Vec<Vec<usize>>,
}

impl PeriodIndex {
    pub fn from_observations(obs: &ObservationSet) -> Self {
        let mut map: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, r) in obs.records.iter().enumerate() {
            map.entry(r.period.year()).or_default().push(i);
        }
        Self::from_map(map)
    }

    /// Builds an index from a period label per row.
    pub fn from_labels(labels: &[i32]) -> Self {
        let mut map: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &p) in labels.iter().enumerate() {
            map.entry(p).or_default().push(i);
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<i32, Vec<usize>>) -> Self {
        let (periods, rows) = map.into_iter().unzip();
        Self { periods, rows }
    }

    pub fn periods(&self) -> &[i32] {
        &self.periods
    }

    pub fn rows_of(&self, period: i32) -> &[usize] {
        self.periods
            .binary_search(&period)
            .map_or(&[], |i| self.rows[i].as_slice())
    }

    pub fn contains(&self, period: i32) -> bool {
        self.periods.binary_search(&period).is_ok()
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalFold {
    /// 1-based position in the plan.
    pub id: usize,
    pub train_periods: Vec<i32>,
    pub val_period: i32,
    pub test_period: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalFoldPlan {
    pub folds: Vec<TemporalFold>,
    /// The latest period; it is only ever used as a test block.
    pub final_holdout: i32,
}

impl TemporalFoldPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `k` folds over the `k` most recent feasible origins. Needs at least
/// `k + 2` periods.
pub fn plan_folds(index: &PeriodIndex, k: usize) -> Result<TemporalFoldPlan> {
    let n = index.len();
    if k == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    if n < k + 2 {
        return Err(Error::TooFewPeriods {
            needed: k + 2,
            found: n,
        });
    }
    let p = index.periods();
    let first_origin = n - 2 - k;
    let folds = (first_origin..n - 2)
        .enumerate()
        .map(|(f, t)| TemporalFold {
            id: f + 1,
            train_periods: p[..=t].to_vec(),
            val_period: p[t + 1],
            test_period: p[t + 2],
        })
        .collect();
    Ok(TemporalFoldPlan {
        folds,
        final_holdout: p[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub fold: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<Violation>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every temporal-ordering violation in `plan`.
///
/// Within a fold every train period must precede the validation period,
/// which must precede the test period; all of them must exist in `index`;
/// and the final holdout may never be trained or validated on.
pub fn check_leakage(plan: &TemporalFoldPlan, index: &PeriodIndex) -> LeakageReport {
    let mut violations = Vec::new();
    let mut push = |fold: usize, message: String| violations.push(Violation { fold, message });
    if !index.contains(plan.final_holdout) {
        push(0, format!("final holdout {} is not a period of the data", plan.final_holdout));
    }
    if index.periods().last().is_some_and(|&last| last > plan.final_holdout) {
        push(0, format!("final holdout {} is not the latest period", plan.final_holdout));
    }
    for f in &plan.folds {
        if f.train_periods.is_empty() {
            push(f.id, "empty training window".into());
        }
        for &t in &f.train_periods {
            if t >= f.val_period {
                push(f.id, format!("train period {t} is not before validation period {}", f.val_period));
            }
            if t >= plan.final_holdout {
                push(f.id, format!("train period {t} reaches the final holdout {}", plan.final_holdout));
            }
            if !index.contains(t) {
                push(f.id, format!("train period {t} is not a period of the data"));
            }
        }
        if f.val_period >= f.test_period {
            push(f.id, format!("validation period {} is not before test period {}", f.val_period, f.test_period));
        }
        if f.val_period >= plan.final_holdout {
            push(f.id, format!("validation period {} touches the final holdout {}", f.val_period, plan.final_holdout));
        }
        for (what, p) in [("validation", f.val_period), ("test", f.test_period)] {
            if !index.contains(p) {
                push(f.id, format!("{what} period {p} is not a period of the data"));
            }
        }
    }
    LeakageReport { violations }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldRows {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldRows {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Row indices of each split. With `firm_disjoint`, validation and test rows
/// of firms that appear in training are removed as well.
pub fn materialize_fold(
    fold: &TemporalFold,
    index: &PeriodIndex,
    obs: &ObservationSet,
    firm_disjoint: bool,
) -> Result<FoldRows> {
    let mut train: Vec<usize> = fold
        .train_periods
        .iter()
        .flat_map(|&p| index.rows_of(p).iter().copied())
        .collect();
    train.sort_unstable();
    let mut val = index.rows_of(fold.val_period).to_vec();
    let mut test = index.rows_of(fold.test_period).to_vec();
    if firm_disjoint {
        let firms: HashSet<&str> = train.iter().map(|&i| obs.records[i].firm_id.as_str()).collect();
        val.retain(|&i| !firms.contains(obs.records[i].firm_id.as_str()));
        test.retain(|&i| !firms.contains(obs.records[i].firm_id.as_str()));
    }
    for (split, rows) in [("train", &train), ("val", &val), ("test", &test)] {
        if rows.is_empty() {
            log::warn!("fold {} has an empty {split} split; skipping", fold.id);
            return Err(Error::EmptySplit { fold: fold.id, split });
        }
    }
    Ok(FoldRows {
        fold: fold.id,
        train,
        val,
        test,
    })
}
