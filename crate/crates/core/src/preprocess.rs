//! Fit-on-train, apply-anywhere feature pipeline.
//!
//! Per numeric feature the transform order is fixed: impute, winsorize to the
//! stored training quantiles, optional log, then `z = (x - mu) / sigma`.
//! Every statistic lives in [`FittedPreprocessor`], which is immutable once
//! fitted and never reads the rows it is applied to.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Observation, ObservationSet};
use crate::matrix::{FeatureMatrix, RowKey};
use crate::metrics::auc;
use crate::stats;

pub const FORMAT_VERSION: u32 = 1;

/// Level used for absent categorical cells.
pub const MISSING_LEVEL: &str = "<missing>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessPolicy {
    pub low_missing_band: f64,
    pub high_missing_band: f64,
    pub knn_k: usize,
    pub winsor_lo: f64,
    pub winsor_hi: f64,
    pub log_skew_threshold: f64,
    pub woe_cardinality_threshold: usize,
    pub drop_auc_margin: f64,
    /// Categorical features with a known ordering, best level first.
    pub ordinal_orders: BTreeMap<String, Vec<String>>,
}

impl Default for PreprocessPolicy {
    fn default() -> Self {
        Self {
            low_missing_band: 0.05,
            high_missing_band: 0.25,
            knn_k: 5,
            winsor_lo: 0.01,
            winsor_hi: 0.99,
            log_skew_threshold: 2.0,
            woe_cardinality_threshold: 10,
            drop_auc_margin: 0.02,
            ordinal_orders: BTreeMap::new(),
        }
    }
}

impl PreprocessPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low_missing_band
            && self.low_missing_band < self.high_missing_band
            && self.high_missing_band <= 1.0)
        {
            return Err(Error::Config("missing bands must satisfy 0 <= low < high <= 1".into()));
        }
        if !(self.winsor_lo < self.winsor_hi) || self.winsor_lo < 0.0 || self.winsor_hi > 1.0 {
            return Err(Error::Config("winsor quantiles must satisfy 0 <= lo < hi <= 1".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Imputation {
    Median { value: f64 },
    Knn { k: usize, donor_columns: Vec<String> },
    Dropped { reason: String },
}

/// Scaling statistics of a retained numeric feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub winsor_bounds: (f64, f64),
    pub log_applied: bool,
    pub mu: f64,
    pub sigma: f64,
}

impl Scaling {
    /// Winsorize, log if marked, standardize.
    pub fn transform(&self, x: f64) -> f64 {
        let clamped = x.clamp(self.winsor_bounds.0, self.winsor_bounds.1);
        let t = if self.log_applied { clamped.ln() } else { clamped };
        (t - self.mu) / self.sigma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericTransform {
    pub feature: String,
    pub missing_fraction: f64,
    pub imputation: Imputation,
    /// Training median, used when no KNN donor shares a column with the query.
    pub fallback_median: Option<f64>,
    /// `None` exactly when the feature is dropped.
    pub scaling: Option<Scaling>,
}

impl NumericTransform {
    pub fn is_retained(&self) -> bool {
        self.scaling.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CategoricalEncoder {
    /// Codes are positions in `order`; unseen levels get the middle code.
    Label { order: Vec<String> },
    OneHot { categories: Vec<String> },
    Woe { table: BTreeMap<String, f64>, default_woe: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTransform {
    pub feature: String,
    pub encoder: CategoricalEncoder,
}

impl CategoricalTransform {
    fn output_names(&self) -> Vec<String> {
        match &self.encoder {
            CategoricalEncoder::OneHot { categories } => categories
                .iter()
                .map(|c| format!("{}={c}", self.feature))
                .collect(),
            _ => vec![self.feature.clone()],
        }
    }

    fn encode(&self, level: &str, out: &mut Vec<f64>) {
        match &self.encoder {
            CategoricalEncoder::Label { order } => {
                let code = order
                    .iter()
                    .position(|l| l == level)
                    .map_or((order.len() as f64 - 1.0) / 2.0, |p| p as f64);
                out.push(code);
            }
            CategoricalEncoder::OneHot { categories } => {
                out.extend(categories.iter().map(|c| f64::from(u8::from(c == level))));
            }
            CategoricalEncoder::Woe { table, default_woe } => {
                out.push(*table.get(level).unwrap_or(default_woe));
            }
        }
    }
}

/// A ratio computed from two contemporaneous columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioFormula {
    pub name: String,
    pub numerator: String,
    pub denominator: String,
}

impl RatioFormula {
    pub fn new(name: &str, numerator: &str, denominator: &str) -> Self {
        Self {
            name: name.into(),
            numerator: numerator.into(),
            denominator: denominator.into(),
        }
    }
}

/// Interest coverage, EBITDA and free-cash-flow margins, and short/long-term
/// leverage. Column names are the conventional snake_case ones; supply your
/// own list when the table uses different names.
pub fn default_formulas() -> Vec<RatioFormula> {
    vec![
        RatioFormula::new("interest_coverage", "ebit", "interest_expense"),
        RatioFormula::new("ebitda_margin", "ebitda", "revenue"),
        RatioFormula::new("fcf_margin", "free_cash_flow", "revenue"),
        RatioFormula::new("short_term_leverage", "short_term_debt", "total_capital"),
        RatioFormula::new("long_term_leverage", "long_term_debt", "total_capital"),
    ]
}

/// Training rows kept for KNN imputation (raw values of retained features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnDonors {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub fold_id: String,
    /// Hash of the training records the statistics came from.
    pub data_hash: String,
    pub n_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPreprocessor {
    pub version: u32,
    pub policy: PreprocessPolicy,
    pub input_numeric: Vec<String>,
    pub input_categorical: Vec<String>,
    pub numeric: Vec<NumericTransform>,
    pub categorical: Vec<CategoricalTransform>,
    pub knn_donors: Option<KnnDonors>,
    pub derived_formulas: Vec<RatioFormula>,
    pub output_columns: Vec<String>,
    pub fitted_on: FitProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearDuplicate {
    pub firm_id: String,
    pub agency: String,
    pub period: String,
    pub kept: usize,
    pub dropped: Vec<usize>,
}

/// Everything removed along the way. Row indices are source-row numbers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub exact_duplicates_removed: Vec<usize>,
    pub near_duplicates_resolved: Vec<NearDuplicate>,
    pub dropped_features: Vec<(String, String)>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl AuditLog {
    pub fn merge(&mut self, other: AuditLog) {
        self.exact_duplicates_removed.extend(other.exact_duplicates_removed);
        self.near_duplicates_resolved.extend(other.near_duplicates_resolved);
        self.dropped_features.extend(other.dropped_features);
        self.warnings.extend(other.warnings);
    }
}

fn exact_key(r: &Observation) -> String {
    let numeric: Vec<Option<u64>> = r.numeric.iter().map(|v| v.map(f64::to_bits)).collect();
    serde_json::to_string(&(
        &r.firm_id,
        r.agency,
        &r.rating,
        r.period,
        numeric,
        &r.categorical,
    ))
    .expect("observation key serializes")
}

/// Removes exact duplicates, then keeps one row per (firm, agency, period):
/// the one with the fewest missing fields, earliest on ties.
pub fn deduplicate(obs: &ObservationSet) -> (ObservationSet, AuditLog) {
    let mut log = AuditLog::default();
    let mut seen = std::collections::HashSet::new();
    let mut unique: Vec<&Observation> = Vec::with_capacity(obs.len());
    for r in &obs.records {
        if seen.insert(exact_key(r)) {
            unique.push(r);
        } else {
            log.exact_duplicates_removed.push(r.source_row);
        }
    }

    let mut groups: HashMap<(&str, _, _), Vec<usize>> = HashMap::new();
    for (i, r) in unique.iter().enumerate() {
        groups
            .entry((r.firm_id.as_str(), r.agency, r.period))
            .or_default()
            .push(i);
    }
    let mut keep = vec![true; unique.len()];
    let mut resolved = Vec::new();
    for ((firm, agency, period), members) in groups {
        if members.len() < 2 {
            continue;
        }
        let best = *members
            .iter()
            .min_by_key(|&&i| (unique[i].missing_count(), i))
            .expect("non-empty group");
        let dropped: Vec<usize> = members.iter().filter(|&&i| i != best).copied().collect();
        for &d in &dropped {
            keep[d] = false;
        }
        resolved.push((
            best,
            NearDuplicate {
                firm_id: firm.to_string(),
                agency: agency.slug().to_string(),
                period: period.to_string(),
                kept: unique[best].source_row,
                dropped: dropped.iter().map(|&d| unique[d].source_row).collect(),
            },
        ));
    }
    resolved.sort_by_key(|(best, _)| *best);
    log.near_duplicates_resolved = resolved.into_iter().map(|(_, n)| n).collect();

    let records = unique
        .into_iter()
        .zip(keep)
        .filter(|&(_r, k)| k).map(|(r, _k)| r.clone())
        .collect();
    let mut out = obs.with_records(records);
    out.rejected = obs.rejected.clone();
    (out, log)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivationLog {
    pub applied: Vec<String>,
    pub skipped: Vec<(String, String)>,
    /// (ratio, rows whose stored value disagreed with the recomputation)
    pub mismatches: Vec<(String, usize)>,
}

fn values_agree(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0),
        _ => false,
    }
}

pub fn derive_features(obs: &ObservationSet) -> (ObservationSet, DerivationLog) {
    derive_features_with(obs, &default_formulas())
}

/// Appends (or overwrites) ratio columns. A ratio whose denominator is
/// within 1e-12 of zero is missing; a formula whose source columns are absent
/// is skipped with a warning.
pub fn derive_features_with(
    obs: &ObservationSet,
    formulas: &[RatioFormula],
) -> (ObservationSet, DerivationLog) {
    let mut out = obs.clone();
    let mut log = DerivationLog::default();
    for f in formulas {
        let (Some(num), Some(den)) = (out.numeric_index(&f.numerator), out.numeric_index(&f.denominator))
        else {
            let reason = format!("source columns `{}`/`{}` not present", f.numerator, f.denominator);
            log::warn!("skipping derived ratio `{}`: {reason}", f.name);
            log.skipped.push((f.name.clone(), reason));
            continue;
        };
        let computed: Vec<Option<f64>> = out
            .records
            .iter()
            .map(|r| match (r.numeric[num], r.numeric[den]) {
                (Some(n), Some(d)) if d.abs() >= 1e-12 => Some(n / d),
                _ => None,
            })
            .collect();
        match out.numeric_index(&f.name) {
            Some(existing) => {
                let mismatched = out
                    .records
                    .iter()
                    .zip(&computed)
                    .filter(|(r, c)| !values_agree(r.numeric[existing], **c))
                    .count();
                if mismatched > 0 {
                    log::warn!("derived ratio `{}` disagreed with stored values on {mismatched} rows", f.name);
                    log.mismatches.push((f.name.clone(), mismatched));
                }
                for (r, c) in out.records.iter_mut().zip(computed) {
                    r.numeric[existing] = c;
                }
            }
            None => {
                out.numeric_features.push(f.name.clone());
                for (r, c) in out.records.iter_mut().zip(computed) {
                    r.numeric.push(c);
                }
            }
        }
        log.applied.push(f.name.clone());
    }
    (out, log)
}

fn categorical_level(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or(MISSING_LEVEL)
}

/// Builder-style entry point carrying provenance alongside the policy.
#[derive(Debug, Clone, Default)]
pub struct Preprocessor {
    pub policy: PreprocessPolicy,
    pub fold_id: String,
    pub formulas: Vec<RatioFormula>,
}

impl Preprocessor {
    pub fn new(policy: PreprocessPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn fold_id(mut self, id: impl Into<String>) -> Self {
        self.fold_id = id.into();
        self
    }

    pub fn formulas(mut self, formulas: Vec<RatioFormula>) -> Self {
        self.formulas = formulas;
        self
    }

    pub fn fit(
        &self,
        train: &ObservationSet,
        binary_targets: Option<&[u8]>,
    ) -> Result<(FittedPreprocessor, AuditLog)> {
        let (mut fp, log) = fit_preprocessor(train, &self.policy, binary_targets)?;
        fp.fitted_on.fold_id = self.fold_id.clone();
        fp.derived_formulas = self.formulas.clone();
        Ok((fp, log))
    }
}

/// Fits every per-feature statistic on `train` only.
pub fn fit_preprocessor(
    train: &ObservationSet,
    policy: &PreprocessPolicy,
    binary_targets: Option<&[u8]>,
) -> Result<(FittedPreprocessor, AuditLog)> {
    policy.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("cannot fit a preprocessor on an empty training set".into()));
    }
    if let Some(y) = binary_targets {
        if y.len() != train.len() {
            return Err(Error::LengthMismatch {
                left: train.len(),
                right: y.len(),
            });
        }
    }
    let n = train.len();
    let mut log = AuditLog::default();
    let mut numeric = Vec::with_capacity(train.numeric_features.len());

    for (j, name) in train.numeric_features.iter().enumerate() {
        let column: Vec<Option<f64>> = train.numeric_column(j).collect();
        let observed: Vec<f64> = column.iter().flatten().copied().collect();
        let missing_fraction = (n - observed.len()) as f64 / n as f64;
        let fallback_median = stats::median(&observed);

        let mut drop = |reason: String, numeric: &mut Vec<NumericTransform>| {
            log.dropped_features.push((name.clone(), reason.clone()));
            numeric.push(NumericTransform {
                feature: name.clone(),
                missing_fraction,
                imputation: Imputation::Dropped { reason },
                fallback_median,
                scaling: None,
            });
        };

        if observed.is_empty() {
            drop("all values missing".into(), &mut numeric);
            continue;
        }

        // Branch on missingness; the donor list is filled in once the
        // retained set is known.
        let use_knn = if missing_fraction < policy.low_missing_band {
            false
        } else if missing_fraction <= policy.high_missing_band {
            true
        } else {
            let y = binary_targets.ok_or_else(|| Error::MissingTargets(name.clone()))?;
            let (scores, labels): (Vec<f64>, Vec<u8>) = column
                .iter()
                .zip(y)
                .filter_map(|(v, &l)| v.map(|x| (x, l)))
                .unzip();
            match auc(&labels, &scores) {
                Ok(a) if (a - 0.5).abs() >= policy.drop_auc_margin => true,
                Ok(a) => {
                    drop(format!("uninformative: univariate auc {a:.4}"), &mut numeric);
                    continue;
                }
                Err(_) => {
                    drop("uninformative: observed rows hold a single class".into(), &mut numeric);
                    continue;
                }
            }
        };

        let sorted = stats::sorted_copy(&observed);
        let lo = stats::quantile_sorted(&sorted, policy.winsor_lo).expect("non-empty");
        let hi = stats::quantile_sorted(&sorted, policy.winsor_hi).expect("non-empty");
        let clamped: Vec<f64> = observed.iter().map(|x| x.clamp(lo, hi)).collect();
        let strictly_positive = clamped.iter().all(|&x| x > 0.0);
        let log_applied = strictly_positive
            && stats::skewness(&clamped).is_some_and(|s| s > policy.log_skew_threshold);
        let transformed: Vec<f64> = if log_applied {
            clamped.iter().map(|x| x.ln()).collect()
        } else {
            clamped
        };
        let mu = stats::mean(&transformed).expect("non-empty");
        let sigma = stats::std_population(&transformed).expect("non-empty");
        if !(sigma > 1e-12 * mu.abs().max(1.0)) {
            drop("constant".into(), &mut numeric);
            continue;
        }
        let imputation = if use_knn {
            Imputation::Knn {
                k: policy.knn_k,
                donor_columns: Vec::new(),
            }
        } else {
            Imputation::Median {
                value: fallback_median.expect("non-empty"),
            }
        };
        numeric.push(NumericTransform {
            feature: name.clone(),
            missing_fraction,
            imputation,
            fallback_median,
            scaling: Some(Scaling {
                winsor_bounds: (lo, hi),
                log_applied,
                mu,
                sigma,
            }),
        });
    }

    let retained: Vec<String> = numeric
        .iter()
        .filter(|t| t.is_retained())
        .map(|t| t.feature.clone())
        .collect();
    let mut any_knn = false;
    for t in &mut numeric {
        if let Imputation::Knn { donor_columns, .. } = &mut t.imputation {
            *donor_columns = retained.iter().filter(|c| **c != t.feature).cloned().collect();
            any_knn = true;
        }
    }
    let knn_donors = any_knn.then(|| {
        let idx: Vec<usize> = retained
            .iter()
            .map(|c| train.numeric_index(c).expect("retained column exists"))
            .collect();
        KnnDonors {
            columns: retained.clone(),
            rows: train
                .records
                .iter()
                .map(|r| idx.iter().map(|&j| r.numeric[j]).collect())
                .collect(),
        }
    });

    let mut categorical = Vec::with_capacity(train.categorical_features.len());
    for (j, name) in train.categorical_features.iter().enumerate() {
        let levels: Vec<&str> = train
            .records
            .iter()
            .map(|r| categorical_level(&r.categorical[j]))
            .collect();
        let encoder = if let Some(order) = policy.ordinal_orders.get(name) {
            CategoricalEncoder::Label {
                order: order.clone(),
            }
        } else {
            let mut distinct: Vec<&str> = levels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() <= policy.woe_cardinality_threshold {
                CategoricalEncoder::OneHot {
                    categories: distinct.into_iter().map(str::to_string).collect(),
                }
            } else {
                let y = binary_targets.ok_or_else(|| Error::MissingTargets(name.clone()))?;
                CategoricalEncoder::Woe {
                    table: woe_table(&levels, y),
                    default_woe: 0.0,
                }
            }
        };
        categorical.push(CategoricalTransform {
            feature: name.clone(),
            encoder,
        });
    }

    let mut output_columns = retained;
    for c in &categorical {
        output_columns.extend(c.output_names());
    }

    let fp = FittedPreprocessor {
        version: FORMAT_VERSION,
        policy: policy.clone(),
        input_numeric: train.numeric_features.clone(),
        input_categorical: train.categorical_features.clone(),
        numeric,
        categorical,
        knn_donors,
        derived_formulas: Vec::new(),
        output_columns,
        fitted_on: FitProvenance {
            fold_id: String::new(),
            data_hash: train.records_hash(),
            n_rows: n,
        },
    };
    Ok((fp, log))
}

/// `WoE = ln(dist_pos / dist_neg)` with 0.5 added to both class counts of
/// every level.
pub fn woe_table(levels: &[&str], y: &[u8]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (&l, &t) in levels.iter().zip(y) {
        let e = counts.entry(l).or_insert((0.0, 0.0));
        if t == 1 {
            e.0 += 1.0;
        } else {
            e.1 += 1.0;
        }
    }
    let c = counts.len() as f64;
    let total_pos: f64 = counts.values().map(|v| v.0).sum::<f64>() + 0.5 * c;
    let total_neg: f64 = counts.values().map(|v| v.1).sum::<f64>() + 0.5 * c;
    counts
        .into_iter()
        .map(|(l, (p, q))| {
            let dist_pos = (p + 0.5) / total_pos;
            let dist_neg = (q + 0.5) / total_neg;
            (l.to_string(), (dist_pos / dist_neg).ln())
        })
        .collect()
}

impl FittedPreprocessor {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fp: FittedPreprocessor = serde_json::from_str(text)?;
        if fp.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: fp.version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(fp)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn state_hash(&self) -> String {
        stats::sha256_hex(&serde_json::to_vec(self).expect("preprocessor serializes"))
    }

    pub fn retained_numeric(&self) -> impl Iterator<Item = &NumericTransform> {
        self.numeric.iter().filter(|t| t.is_retained())
    }

    pub fn apply(&self, obs: &ObservationSet) -> Result<FeatureMatrix> {
        apply_preprocessor(self, obs)
    }
}

fn column_positions(expected: &[String], actual: &[String]) -> Result<Vec<usize>> {
    for a in actual {
        if !expected.contains(a) {
            return Err(Error::UnknownColumn(a.clone()));
        }
    }
    expected
        .iter()
        .map(|e| {
            actual
                .iter()
                .position(|a| a == e)
                .ok_or_else(|| Error::MissingColumn(e.clone()))
        })
        .collect()
}

struct DonorIndex<'a> {
    /// Standardized donor values, row-major over `fp.knn_donors.columns`.
    z: Vec<Vec<Option<f64>>>,
    raw: &'a [Vec<Option<f64>>],
    scalings: Vec<&'a Scaling>,
}

impl<'a> DonorIndex<'a> {
    fn new(fp: &'a FittedPreprocessor, donors: &'a KnnDonors) -> Self {
        let scalings: Vec<&Scaling> = donors
            .columns
            .iter()
            .map(|c| {
                fp.numeric
                    .iter()
                    .find(|t| &t.feature == c)
                    .and_then(|t| t.scaling.as_ref())
                    .expect("donor columns are retained")
            })
            .collect();
        let z = donors
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&scalings)
                    .map(|(v, s)| v.map(|x| s.transform(x)))
                    .collect()
            })
            .collect();
        Self {
            z,
            raw: &donors.rows,
            scalings,
        }
    }

    /// Mean of the target column over the k nearest donors that observe it,
    /// using the RMS-rescaled Euclidean distance over shared columns.
    fn impute(&self, target: usize, query_raw: &[Option<f64>], k: usize) -> Option<f64> {
        let m = self.scalings.len();
        let query_z: Vec<Option<f64>> = query_raw
            .iter()
            .zip(&self.scalings)
            .map(|(v, s)| v.map(|x| s.transform(x)))
            .collect();
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        for (i, donor) in self.z.iter().enumerate() {
            if self.raw[i][target].is_none() {
                continue;
            }
            let mut ss = 0.0;
            let mut shared = 0usize;
            for c in 0..m {
                if c == target {
                    continue;
                }
                if let (Some(a), Some(b)) = (query_z[c], donor[c]) {
                    ss += (a - b) * (a - b);
                    shared += 1;
                }
            }
            if shared > 0 {
                let usable = (m - 1).max(1) as f64;
                candidates.push(((ss * usable / shared as f64).sqrt(), i));
            }
        }
        if candidates.is_empty() {
            return None;
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let chosen = &candidates[..k.min(candidates.len())];
        let sum: f64 = chosen
            .iter()
            .map(|&(_, i)| self.raw[i][target].expect("donor observes target"))
            .sum();
        Some(sum / chosen.len() as f64)
    }
}

/// Transforms `obs` with the frozen statistics in `fp`. The output is dense.
pub fn apply_preprocessor(fp: &FittedPreprocessor, obs: &ObservationSet) -> Result<FeatureMatrix> {
    let num_pos = column_positions(&fp.input_numeric, &obs.numeric_features)?;
    let cat_pos = column_positions(&fp.input_categorical, &obs.categorical_features)?;
    let donors = fp.knn_donors.as_ref().map(|d| DonorIndex::new(fp, d));
    let donor_cols: Vec<usize> = fp
        .knn_donors
        .as_ref()
        .map(|d| {
            d.columns
                .iter()
                .map(|c| {
                    let k = fp.input_numeric.iter().position(|f| f == c).expect("donor is an input");
                    num_pos[k]
                })
                .collect()
        })
        .unwrap_or_default();

    let m = fp.output_columns.len();
    let mut values = Vec::with_capacity(obs.len() * m);
    let mut row_keys = Vec::with_capacity(obs.len());
    let mut row_out = Vec::with_capacity(m);
    for (i, r) in obs.records.iter().enumerate() {
        row_out.clear();
        let query_raw: Vec<Option<f64>> = donor_cols.iter().map(|&c| r.numeric[c]).collect();
        let mut donor_slot = 0usize;
        for (k, t) in fp.numeric.iter().enumerate() {
            let Some(scaling) = &t.scaling else { continue };
            let raw = r.numeric[num_pos[k]];
            let value = match (raw, &t.imputation) {
                (Some(x), _) => Some(x),
                (None, Imputation::Median { value }) => Some(*value),
                (None, Imputation::Knn { k: kk, .. }) => donors
                    .as_ref()
                    .and_then(|d| d.impute(donor_slot, &query_raw, *kk))
                    .or(t.fallback_median),
                (None, Imputation::Dropped { .. }) => None,
            };
            donor_slot += 1;
            let x = value.ok_or_else(|| Error::UnimputedValue {
                feature: t.feature.clone(),
                row: r.source_row,
            })?;
            row_out.push(scaling.transform(x));
        }
        for (k, c) in fp.categorical.iter().enumerate() {
            c.encode(categorical_level(&r.categorical[cat_pos[k]]), &mut row_out);
        }
        debug_assert_eq!(row_out.len(), m, "row {i}");
        values.extend_from_slice(&row_out);
        row_keys.push(RowKey {
            firm_id: r.firm_id.clone(),
            agency: r.agency,
            period: r.period,
        });
    }
    FeatureMatrix::from_flat(fp.output_columns.clone(), values, row_keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Agency;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(i: usize, firm: &str, year: i32, numeric: Vec<Option<f64>>, cat: Vec<Option<String>>) -> Observation {
        Observation {
            source_row: i + 1,
            firm_id: firm.into(),
            agency: Agency::Fitch,
            rating: "A".into(),
            rating_known: true,
            period: NaiveDate::from_ymd_opt(year, 12, 31).unwrap(),
            numeric,
            categorical: cat,
        }
    }

    fn set(numeric: &[&str], categorical: &[&str], records: Vec<Observation>) -> ObservationSet {
        ObservationSet {
            numeric_features: numeric.iter().map(|s| s.to_string()).collect(),
            categorical_features: categorical.iter().map(|s| s.to_string()).collect(),
            records,
            rejected: vec![],
            content_hash: "test".into(),
        }
    }

    /// Column `x` is complete, `y` has `missing_every`-spaced gaps.
    fn numeric_set(n: usize, missing_every: Option<usize>, seed: u64) -> ObservationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                let x: f64 = rng.gen_range(-3.0..3.0);
                let y = if missing_every.is_some_and(|m| i % m == 0) {
                    None
                } else {
                    Some(2.0 * x + rng.gen_range(-0.1..0.1))
                };
                record(i, &format!("f{i}"), 2010 + (i % 5) as i32, vec![Some(x), y], vec![])
            })
            .collect();
        set(&["x", "y"], &[], records)
    }

    #[test]
    fn exact_duplicates_collapse() {
        let a = record(0, "f", 2012, vec![Some(1.0)], vec![]);
        let mut b = a.clone();
        b.source_row = 2;
        let obs = set(&["x"], &[], vec![a, b]);
        let (out, log) = deduplicate(&obs);
        assert_eq!(out.len(), 1);
        assert_eq!(log.exact_duplicates_removed, vec![2]);
    }

    #[test]
    fn near_duplicates_keep_most_complete() {
        let a = record(0, "f", 2012, vec![Some(1.0), None, None, None], vec![]);
        let b = record(1, "f", 2012, vec![Some(1.0), Some(2.0), Some(3.0), None], vec![]);
        let obs = set(&["a", "b", "c", "d"], &[], vec![a, b]);
        let (out, log) = deduplicate(&obs);
        assert_eq!(out.len(), 1);
        assert_eq!(out.records[0].source_row, 2);
        assert_eq!(log.near_duplicates_resolved[0].kept, 2);
        assert_eq!(log.near_duplicates_resolved[0].dropped, vec![1]);
    }

    #[test]
    fn unique_rows_pass_through() {
        let obs = numeric_set(100, None, 1);
        let (out, log) = deduplicate(&obs);
        assert_eq!(out, obs);
        assert_eq!(log, AuditLog::default());
    }

    #[test]
    fn derived_ratios() {
        let r0 = record(0, "a", 2012, vec![Some(50.0), Some(10.0), Some(5.0), Some(0.0)], vec![]);
        let obs = set(&["ebit", "interest_expense", "ebitda", "revenue"], &[], vec![r0]);
        let (out, log) = derive_features(&obs);
        let ic = out.numeric_index("interest_coverage").unwrap();
        assert_eq!(out.records[0].numeric[ic], Some(5.0));
        let em = out.numeric_index("ebitda_margin").unwrap();
        assert_eq!(out.records[0].numeric[em], None);
        assert!(log.skipped.iter().any(|(n, _)| n == "fcf_margin"));
    }

    #[test]
    fn recomputed_column_overwrites_and_logs_mismatch() {
        // stored interest_coverage: row0 correct, row1 wrong, row2 stale where
        // denominator is zero
        let rows = vec![
            record(0, "a", 2012, vec![Some(50.0), Some(10.0), Some(5.0)], vec![]),
            record(1, "b", 2012, vec![Some(30.0), Some(10.0), Some(4.0)], vec![]),
            record(2, "c", 2012, vec![Some(30.0), Some(0.0), Some(7.0)], vec![]),
        ];
        let obs = set(&["ebit", "interest_expense", "interest_coverage"], &[], rows);
        // oracle: recompute by hand and compare with the stored column
        let expected: Vec<Option<f64>> = vec![Some(5.0), Some(3.0), None];
        let stored: Vec<Option<f64>> = obs.numeric_column(2).collect();
        let oracle_mismatch = expected
            .iter()
            .zip(&stored)
            .filter(|(e, s)| !values_agree(**e, **s))
            .count();
        assert_eq!(oracle_mismatch, 2);

        let (out, log) = derive_features_with(&obs, &[RatioFormula::new("interest_coverage", "ebit", "interest_expense")]);
        assert_eq!(out.numeric_features.len(), 3);
        assert_eq!(out.numeric_column(2).collect::<Vec<_>>(), expected);
        assert_eq!(log.mismatches, vec![("interest_coverage".to_string(), oracle_mismatch)]);
    }

    #[test]
    fn missingness_branches() {
        let policy = PreprocessPolicy::default();
        // 3% missing -> median
        let obs = numeric_set(100, Some(34), 2);
        let (fp, _) = fit_preprocessor(&obs, &policy, None).unwrap();
        assert!(matches!(fp.numeric[1].imputation, Imputation::Median { .. }), "{:?}", fp.numeric[1]);
        // 15% missing (every 7th of 100 rows) -> knn with k = 5
        let obs = numeric_set(100, Some(7), 3);
        let (fp, _) = fit_preprocessor(&obs, &policy, None).unwrap();
        match &fp.numeric[1].imputation {
            Imputation::Knn { k, donor_columns } => {
                assert_eq!(*k, 5);
                assert_eq!(donor_columns, &vec!["x".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heavy_missingness_screen() {
        // 50% missing: informative feature retained, noise dropped
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut labels = Vec::new();
        let records: Vec<Observation> = (0..200)
            .map(|i| {
                let y = (i % 2) as u8;
                labels.push(y);
                let signal = (i % 4 < 2).then(|| f64::from(y) + rng.gen_range(-0.3..0.3));
                let noise = (i % 4 < 2).then(|| rng.gen_range(-1.0..1.0));
                let _ = noise;
                record(i, &format!("f{i}"), 2012, vec![signal, Some(rng.gen_range(0.0..1.0)), Some(7.0)], vec![])
            })
            .collect();
        let obs = set(&["signal", "x", "constant"], &[], records);
        assert!(matches!(
            fit_preprocessor(&obs, &PreprocessPolicy::default(), None),
            Err(Error::MissingTargets(_))
        ));
        let (fp, log) = fit_preprocessor(&obs, &PreprocessPolicy::default(), Some(&labels)).unwrap();
        assert!(matches!(fp.numeric[0].imputation, Imputation::Knn { .. }));
        assert!(matches!(&fp.numeric[2].imputation, Imputation::Dropped { reason } if reason == "constant"));
        assert_eq!(log.dropped_features, vec![("constant".to_string(), "constant".to_string())]);
        assert!(fp.retained_numeric().all(|t| t.scaling.as_ref().unwrap().sigma > 0.0));

        // the same column with its signal destroyed is dropped
        let mut shuffled = obs.clone();
        for (i, r) in shuffled.records.iter_mut().enumerate() {
            if r.numeric[0].is_some() {
                r.numeric[0] = Some(((i * 7919) % 101) as f64);
            }
        }
        let (fp, _) = fit_preprocessor(&shuffled, &PreprocessPolicy::default(), Some(&labels)).unwrap();
        let reason = match &fp.numeric[0].imputation {
            Imputation::Dropped { reason } => reason.clone(),
            other => panic!("expected a drop, got {other:?}"),
        };
        assert!(reason.starts_with("uninformative"), "{reason}");
    }

    #[test]
    fn mean_maps_to_zero_and_clamp_applies() {
        let obs = numeric_set(200, None, 5);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        let s = fp.numeric[0].scaling.clone().unwrap();
        if !s.log_applied {
            assert!(s.transform(s.mu).abs() < 1e-15);
        }
        assert_eq!(s.transform(1e9), s.transform(s.winsor_bounds.1));
    }

    #[test]
    fn winsor_bounds_match_sort_oracle() {
        let obs = numeric_set(200, None, 6);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        let mut xs: Vec<f64> = obs.numeric_column(0).flatten().collect();
        xs.sort_by(f64::total_cmp);
        // 1% of 199 gaps = 1.99 -> between the 2nd and 3rd order statistics
        let lo = xs[1] + 0.99 * (xs[2] - xs[1]);
        let hi = xs[197] + 0.01 * (xs[198] - xs[197]);
        let (flo, fhi) = fp.numeric[0].scaling.as_ref().unwrap().winsor_bounds;
        assert!((flo - lo).abs() < 1e-12 && (fhi - hi).abs() < 1e-12);
    }

    #[test]
    fn knn_imputes_mean_of_constant_donors() {
        // donors all hold y = 7; the query is nearest to them
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(record(i, &format!("d{i}"), 2012, vec![Some(i as f64 * 0.01), Some(7.0)], vec![]));
        }
        for i in 5..20 {
            records.push(record(i, &format!("e{i}"), 2012, vec![Some(10.0 + i as f64), Some(100.0 + i as f64)], vec![]));
        }
        for i in 20..24 {
            records.push(record(i, &format!("m{i}"), 2012, vec![Some(0.02), None], vec![]));
        }
        let obs = set(&["x", "y"], &[], records);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        assert!(matches!(fp.numeric[1].imputation, Imputation::Knn { .. }));
        let query = set(&["x", "y"], &[], vec![record(0, "q", 2013, vec![Some(0.02), None], vec![])]);
        let m = apply_preprocessor(&fp, &query).unwrap();
        let s = fp.numeric[1].scaling.as_ref().unwrap();
        assert!((m.get(0, 1) - s.transform(7.0)).abs() < 1e-12);
    }

    #[test]
    fn categorical_encoders() {
        let mut policy = PreprocessPolicy {
            woe_cardinality_threshold: 2,
            ..PreprocessPolicy::default()
        };
        policy
            .ordinal_orders
            .insert("tier".into(), vec!["high".into(), "mid".into(), "low".into()]);
        let levels = ["a", "b", "c"];
        let mut labels = Vec::new();
        let records: Vec<Observation> = (0..60)
            .map(|i| {
                let lvl = levels[i % 3];
                // level a: all positive, b: balanced, c: all negative
                let y = match lvl {
                    "a" => 1,
                    "b" => (i / 3 % 2) as u8,
                    _ => 0,
                };
                labels.push(y);
                let tier = ["high", "mid", "low"][i % 3];
                let small = ["x", "y"][i % 2];
                record(i, &format!("f{i}"), 2012, vec![Some(i as f64)], vec![Some(lvl.into()), Some(tier.into()), Some(small.into())])
            })
            .collect();
        let obs = set(&["n"], &["sector", "tier", "flag"], records);
        let (fp, _) = fit_preprocessor(&obs, &policy, Some(&labels)).unwrap();
        let CategoricalEncoder::Woe { table, default_woe } = &fp.categorical[0].encoder else {
            panic!("expected woe");
        };
        // global mix is balanced, so the balanced level sits at exactly 0
        assert_eq!(table["b"], 0.0);
        assert!(table["a"] > 0.0 && table["c"] < 0.0);
        assert_eq!(*default_woe, 0.0);
        assert!(matches!(fp.categorical[1].encoder, CategoricalEncoder::Label { .. }));
        assert!(matches!(fp.categorical[2].encoder, CategoricalEncoder::OneHot { .. }));
        assert_eq!(
            fp.output_columns,
            vec!["n", "sector", "tier", "flag=x", "flag=y"]
        );

        let unseen = set(
            &["n"],
            &["sector", "tier", "flag"],
            vec![record(0, "u", 2013, vec![Some(1.0)], vec![Some("zzz".into()), Some("mid".into()), Some("w".into())])],
        );
        let m = apply_preprocessor(&fp, &unseen).unwrap();
        assert_eq!(m.row(0)[1..], [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn woe_without_targets_is_an_error() {
        let policy = PreprocessPolicy {
            woe_cardinality_threshold: 1,
            ..PreprocessPolicy::default()
        };
        let records = (0..4)
            .map(|i| record(i, "f", 2012, vec![Some(i as f64)], vec![Some(format!("c{i}"))]))
            .collect();
        let obs = set(&["n"], &["c"], records);
        assert!(matches!(fit_preprocessor(&obs, &policy, None), Err(Error::MissingTargets(_))));
    }

    #[test]
    fn woe_of_prior_matching_level_is_near_zero() {
        // 30% positive overall; level "m" also 30% positive
        let mut levels = Vec::new();
        let mut y = Vec::new();
        for i in 0..1000 {
            levels.push(if i < 500 { "m" } else if i < 750 { "p" } else { "q" });
            let pos = matches!(i, 0..=149 | 500..=599 | 750..=799);
            y.push(u8::from(pos));
        }
        let t = woe_table(&levels, &y);
        assert!(t["m"].abs() < 0.01, "{}", t["m"]);
    }

    #[test]
    fn unknown_and_missing_columns() {
        let obs = numeric_set(50, None, 7);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        let mut extra = obs.clone();
        extra.numeric_features.push("zzz".into());
        for r in &mut extra.records {
            r.numeric.push(Some(1.0));
        }
        assert!(matches!(apply_preprocessor(&fp, &extra), Err(Error::UnknownColumn(c)) if c == "zzz"));
        let mut fewer = obs.clone();
        fewer.numeric_features.pop();
        for r in &mut fewer.records {
            r.numeric.pop();
        }
        assert!(matches!(apply_preprocessor(&fp, &fewer), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn train_self_consistency() {
        let obs = numeric_set(300, None, 8);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        let m = apply_preprocessor(&fp, &obs).unwrap();
        for (j, t) in fp.retained_numeric().enumerate() {
            if t.scaling.as_ref().unwrap().log_applied {
                continue;
            }
            let col = m.column(j);
            assert!(stats::mean(&col).unwrap().abs() < 1e-9);
            assert!((stats::std_population(&col).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn skewed_positive_feature_is_logged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let records = (0..500)
            .map(|i| {
                let v: f64 = (rng.gen_range(0.0f64..4.0)).exp().powi(2);
                record(i, &format!("f{i}"), 2012, vec![Some(v), Some(v - 1000.0)], vec![])
            })
            .collect();
        let obs = set(&["pos", "shifted"], &[], records);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        assert!(fp.numeric[0].scaling.as_ref().unwrap().log_applied);
        // same shape but not strictly positive
        assert!(!fp.numeric[1].scaling.as_ref().unwrap().log_applied);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let obs = numeric_set(120, Some(6), 10);
        let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
        let back = FittedPreprocessor::from_json(&fp.to_json().unwrap()).unwrap();
        assert_eq!(back, fp);
        let a = apply_preprocessor(&fp, &obs).unwrap();
        let b = apply_preprocessor(&back, &obs).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn policy_validation() {
        let bad = PreprocessPolicy {
            low_missing_band: 0.3,
            ..PreprocessPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocessPolicy {
            knn_k: 0,
            ..PreprocessPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn deduplicate_is_idempotent(dups in proptest::collection::vec((0usize..6, 0i32..3, proptest::option::of(0u8..3)), 1..30)) {
            let records = dups
                .iter()
                .enumerate()
                .map(|(i, (firm, year, v))| record(i, &format!("f{firm}"), 2010 + year, vec![v.map(f64::from)], vec![]))
                .collect();
            let obs = set(&["x"], &[], records);
            let (once, log) = deduplicate(&obs);
            let (twice, log2) = deduplicate(&once);
            prop_assert_eq!(&once.records, &twice.records);
            prop_assert!(log2.exact_duplicates_removed.is_empty());
            prop_assert!(log2.near_duplicates_resolved.is_empty());
            // every removed row is logged exactly once
            let mut removed: Vec<usize> = log.exact_duplicates_removed.clone();
            removed.extend(log.near_duplicates_resolved.iter().flat_map(|n| n.dropped.clone()));
            removed.sort_unstable();
            let before = removed.len();
            removed.dedup();
            prop_assert_eq!(before, removed.len());
            prop_assert_eq!(once.len() + removed.len(), obs.len());
        }

        #[test]
        fn winsorized_values_stay_in_bounds(x in -1e6f64..1e6) {
            let obs = numeric_set(60, None, 11);
            let (fp, _) = fit_preprocessor(&obs, &PreprocessPolicy::default(), None).unwrap();
            let s = fp.numeric[0].scaling.as_ref().unwrap();
            let z = s.transform(x);
            prop_assert!(z >= s.transform(s.winsor_bounds.0) && z <= s.transform(s.winsor_bounds.1));
        }
    }
}
