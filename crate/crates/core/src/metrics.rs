//! Evaluation statistics: classification and regression reports, Cohen's
//! kappa, AUC (two independent formulations), DeLong's paired test,
//! percentile bootstrap intervals, population stability index and
//! calibration/ROC curve points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const PSI_FLAG_THRESHOLD: f64 = 0.25;
pub const PSI_FLOOR: f64 = 1e-4;
pub const BOOTSTRAP_LEVEL: f64 = 0.95;
pub const MIN_VALID_RESAMPLES: usize = 100;
const BOOTSTRAP_RETRIES: usize = 10;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::InvalidInput("empty input".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    /// Counts from probabilities thresholded at `threshold` (`p >= t` is
    /// positive).
    pub fn from_probs(labels: &[u8], probs: &[f64], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&y, &p) in labels.iter().zip(probs) {
            match (y == 1, p >= threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Cohen's kappa `(P_o - P_e) / (1 - P_e)`; defined as 0 when `P_e = 1`.
pub fn kappa(c: &ConfusionCounts) -> Result<f64> {
    let n = c.total();
    if n == 0 {
        return Err(Error::InvalidInput("kappa of an empty confusion matrix".into()));
    }
    // (p_o - p_e) / (1 - p_e) with the common n² factor cancelled, so the
    // only rounding is the final division
    let (tp, fp, tn, fn_) = (i128::from(c.tp), i128::from(c.fp), i128::from(c.tn), i128::from(c.fn_));
    let num = 2 * (tp * tn - fn_ * fp);
    let den = (tp + fp) * (fp + tn) + (tp + fn_) * (fn_ + tn);
    if den == 0 {
        log::warn!("kappa: chance agreement is 1, reporting 0");
        return Ok(0.0);
    }
    Ok(num as f64 / den as f64)
}

fn class_counts(labels: &[u8]) -> (u64, u64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    (pos, labels.len() as u64 - pos)
}

/// Mann–Whitney AUC: `(concordant + 0.5 * tied) / (n_pos * n_neg)`.
///
/// Counts are accumulated as integers (doubled to keep ties exact) so the
/// result is the exactly rounded rational.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass("AUC"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // For each tie block (ascending): every positive beats all negatives seen
    // in earlier blocks and ties with the negatives in its own block.
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let (mut bp, mut bn) = (0u128, 0u128);
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                bp += 1;
            } else {
                bn += 1;
            }
        }
        doubled += bp * (2 * neg_below + bn);
        neg_below += bn;
        i = j + 1;
    }
    Ok(doubled as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

/// Area under the ROC curve by trapezoidal integration over distinct score
/// thresholds, with integer arithmetic on the (FP, TP) step counts.
pub fn auc_trapezoid(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let pts = roc_counts(labels, scores)?;
    let (p, n) = class_counts(labels);
    let mut area2: u128 = 0;
    for w in pts.windows(2) {
        let (fp0, tp0) = (w[0].0 as u128, w[0].1 as u128);
        let (fp1, tp1) = (w[1].0 as u128, w[1].1 as u128);
        area2 += (fp1 - fp0) * (tp0 + tp1);
    }
    Ok(area2 as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

/// Cumulative (FP, TP) counts sweeping the threshold from +inf downward,
/// starting at (0, 0). Returns the score at which each point is reached.
fn roc_counts(labels: &[u8], scores: &[f64]) -> Result<Vec<(u64, u64, f64)>> {
    check_lengths(labels.len(), scores.len())?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass("ROC curve"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0u64, 0u64, f64::INFINITY)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp, tp, s));
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores at or above this are called positive; `None` for the origin
    /// point, whose threshold lies above every score.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn roc_curve(labels: &[u8], scores: &[f64]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(labels);
    Ok(roc_counts(labels, scores)?
        .into_iter()
        .map(|(fp, tp, s)| RocPoint {
            threshold: s.is_finite().then_some(s),
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub brier: f64,
    pub kappa: f64,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
}

pub fn classification_metrics(labels: &[u8], probs: &[f64], threshold: f64) -> Result<ClassificationReport> {
    check_lengths(labels.len(), probs.len())?;
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidInput(format!("label {bad} is not binary")));
    }
    if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {bad} outside [0, 1]")));
    }
    let c = ConfusionCounts::from_probs(labels, probs, threshold);
    let n = c.total() as f64;
    let ratio = |num: u64, den: u64, what: &str| {
        if den == 0 {
            log::warn!("{what} is 0/0, reporting 0");
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp, "precision");
    let recall = ratio(c.tp, c.tp + c.fn_, "recall");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let brier = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| (p - f64::from(y)).powi(2))
        .sum::<f64>()
        / n;
    Ok(ClassificationReport {
        accuracy: (c.tp + c.tn) as f64 / n,
        precision,
        recall,
        f1,
        auc: auc(labels, probs)?,
        brier,
        kappa: kappa(&c)?,
        threshold,
        confusion: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
}

pub fn regression_metrics(y: &[f64], pred: &[f64]) -> Result<RegressionReport> {
    check_lengths(y.len(), pred.len())?;
    let n = y.len() as f64;
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let sae: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum();
    let mean = stats::mean(y).expect("non-empty");
    let sst: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    let r2 = if y.len() >= 2 && sst > 0.0 {
        Some(1.0 - sse / sst)
    } else {
        None
    };
    Ok(RegressionReport {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_diff: f64,
    pub z: f64,
    pub p_value: f64,
}

/// DeLong structural components: for each positive the fraction of
/// negatives it outranks (ties half), and for each negative the fraction of
/// positives that outrank it.
fn structural_components(labels: &[u8], scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = labels.iter().zip(scores).filter(|(y, _)| **y == 1).map(|(_, s)| *s).collect();
    let neg: Vec<f64> = labels.iter().zip(scores).filter(|(y, _)| **y != 1).map(|(_, s)| *s).collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = stats::average_ranks(&all);
    let r_pos = stats::average_ranks(&pos);
    let r_neg = stats::average_ranks(&neg);
    let v10 = (0..pos.len()).map(|i| (r_all[i] - r_pos[i]) / n).collect();
    let v01 = (0..neg.len())
        .map(|j| 1.0 - (r_all[pos.len() + j] - r_neg[j]) / m)
        .collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let ma = stats::mean(a).expect("non-empty");
    let mb = stats::mean(b).expect("non-empty");
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// Paired DeLong test for `AUC_a - AUC_b`, two-sided normal p-value.
pub fn delong_test(labels: &[u8], scores_a: &[f64], scores_b: &[f64]) -> Result<DeLongResult> {
    check_lengths(labels.len(), scores_a.len())?;
    check_lengths(labels.len(), scores_b.len())?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass("DeLong test"));
    }
    let (a10, a01) = structural_components(labels, scores_a);
    let (b10, b01) = structural_components(labels, scores_b);
    let auc_a = auc(labels, scores_a)?;
    let auc_b = auc(labels, scores_b)?;
    let var10 = covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10);
    let var01 = covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01);
    let var_diff = (var10 / p as f64 + var01 / n as f64).max(0.0);
    let diff = auc_a - auc_b;
    let (z, p_value) = if diff == 0.0 {
        (0.0, 1.0)
    } else if var_diff <= 0.0 {
        (diff.signum() * f64::INFINITY, 0.0)
    } else {
        let z = diff / var_diff.sqrt();
        (z, (2.0 * (1.0 - stats::normal_cdf(z.abs()))).clamp(0.0, 1.0))
    };
    Ok(DeLongResult {
        auc_a,
        auc_b,
        var_diff,
        z,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_resamples: usize,
    /// Resamples abandoned after exhausting their redraw budget.
    pub skipped: usize,
}

/// Percentile bootstrap over row indices `0..n`.
///
/// `stat` receives a resample as a list of row indices and returns `None`
/// when the statistic is undefined on it (e.g. one class for AUC); such
/// resamples are redrawn up to 10 times and then skipped. Every resample
/// draws from its own derived seed, so the result does not depend on the
/// thread schedule.
pub fn bootstrap_ci<F>(n: usize, stat: F, n_resamples: usize, seed: u64) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidInput("bootstrap of an empty sample".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = stat(&all).ok_or_else(|| Error::InvalidInput("statistic undefined on the full sample".into()))?;
    let draws: Vec<Option<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            for attempt in 0..=BOOTSTRAP_RETRIES {
                let s = stats::derive_seed(seed, &["bootstrap", &b.to_string(), &attempt.to_string()]);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                if let Some(v) = stat(&idx) {
                    return Some(v);
                }
            }
            None
        })
        .collect();
    let mut valid: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = n_resamples - valid.len();
    if valid.len() < MIN_VALID_RESAMPLES {
        return Err(Error::TooFewResamples {
            valid: valid.len(),
            requested: n_resamples,
        });
    }
    valid.sort_by(f64::total_cmp);
    let alpha = (1.0 - BOOTSTRAP_LEVEL) / 2.0;
    Ok(BootstrapCI {
        point,
        lower: stats::quantile_sorted(&valid, alpha).expect("non-empty"),
        upper: stats::quantile_sorted(&valid, 1.0 - alpha).expect("non-empty"),
        level: BOOTSTRAP_LEVEL,
        n_resamples: valid.len(),
        skipped,
    })
}

/// AUC bootstrap interval; resamples holding one class are redrawn.
pub fn bootstrap_auc(labels: &[u8], scores: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    check_lengths(labels.len(), scores.len())?;
    bootstrap_ci(
        labels.len(),
        |idx| {
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            auc(&y, &s).ok()
        },
        n_resamples,
        seed,
    )
}

pub fn bootstrap_rmse(y: &[f64], pred: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    check_lengths(y.len(), pred.len())?;
    bootstrap_ci(
        y.len(),
        |idx| {
            let sse: f64 = idx.iter().map(|&i| (y[i] - pred[i]).powi(2)).sum();
            Some((sse / idx.len() as f64).sqrt())
        },
        n_resamples,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiValue {
    pub psi: f64,
    /// Interior bin edges (quantiles of the expected sample, deduplicated).
    pub edges: Vec<f64>,
    pub expected_proportions: Vec<f64>,
    pub actual_proportions: Vec<f64>,
}

pub fn psi_flagged(psi: f64) -> bool {
    psi > PSI_FLAG_THRESHOLD
}

/// `Σ (a - e) ln(a / e)` over bins, each proportion floored at 1e-4.
pub fn psi_from_proportions(expected: &[f64], actual: &[f64]) -> f64 {
    expected
        .iter()
        .zip(actual)
        .map(|(&e, &a)| {
            let (e, a) = (e.max(PSI_FLOOR), a.max(PSI_FLOOR));
            (a - e) * (a / e).ln()
        })
        .sum()
}

fn bin_proportions(xs: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; edges.len() + 1];
    for &x in xs {
        // bins are (edge[i-1], edge[i]]
        counts[edges.partition_point(|&e| e < x)] += 1;
    }
    counts.iter().map(|&c| c as f64 / xs.len() as f64).collect()
}

/// PSI of `actual` against `expected` over `n_bins` quantile bins of
/// `expected`.
pub fn psi(expected: &[f64], actual: &[f64], n_bins: usize) -> Result<PsiValue> {
    if expected.is_empty() || actual.is_empty() {
        return Err(Error::InvalidInput("psi needs non-empty samples".into()));
    }
    if n_bins < 2 {
        return Err(Error::InvalidInput("psi needs at least two bins".into()));
    }
    let sorted = stats::sorted_copy(expected);
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|i| stats::quantile_sorted(&sorted, i as f64 / n_bins as f64).expect("non-empty"))
        .collect();
    edges.dedup();
    let e = bin_proportions(expected, &edges);
    let a = bin_proportions(actual, &edges);
    Ok(PsiValue {
        psi: psi_from_proportions(&e, &a),
        edges,
        expected_proportions: e,
        actual_proportions: a,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePsi {
    pub feature: String,
    pub psi: f64,
    pub edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiReport {
    pub features: Vec<FeaturePsi>,
    pub flagged: Vec<String>,
}

/// Column-wise PSI between two matrices with identical columns.
pub fn psi_report(
    names: &[String],
    expected: &crate::matrix::FeatureMatrix,
    actual: &crate::matrix::FeatureMatrix,
    n_bins: usize,
) -> Result<PsiReport> {
    if expected.column_names != actual.column_names || names.len() != expected.n_cols() {
        return Err(Error::ColumnMismatch("psi inputs have different columns".into()));
    }
    let mut features = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let v = psi(&expected.column(j), &actual.column(j), n_bins)?;
        features.push(FeaturePsi {
            feature: name.clone(),
            psi: v.psi,
            edges: v.edges,
        });
    }
    let flagged = features
        .iter()
        .filter(|f| psi_flagged(f.psi))
        .map(|f| f.feature.clone())
        .collect();
    Ok(PsiReport { features, flagged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_predicted: f64,
    pub observed_rate: f64,
    pub count: usize,
}

/// Reliability diagram points over `n_bins` equal-width probability bins;
/// empty bins are omitted.
pub fn calibration_curve(labels: &[u8], probs: &[f64], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    check_lengths(labels.len(), probs.len())?;
    let n_bins = n_bins.max(1);
    let mut acc = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for (&y, &p) in labels.iter().zip(probs) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        acc[b].0 += p;
        acc[b].1 += f64::from(y);
        acc[b].2 += 1;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, (_, _, c))| *c > 0)
        .map(|(b, (sp, sy, c))| CalibrationBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            mean_predicted: sp / c as f64,
            observed_rate: sy / c as f64,
            count: c,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let r = classification_metrics(&[0, 0, 1, 1], &[0.0, 0.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!((r.accuracy, r.auc, r.brier, r.kappa), (1.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn constant_half_probability() {
        let r = classification_metrics(&[0, 1, 1, 0], &[0.5; 4], 0.5).unwrap();
        assert_eq!(r.brier, 0.25);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn kappa_worked_example() {
        let c = ConfusionCounts::new(40, 20, 30, 10);
        // P_o = 0.70, P_e = 0.6 * 0.5 + 0.4 * 0.5 = 0.50
        assert_eq!(kappa(&c).unwrap(), 0.4);
        assert_eq!(kappa(&ConfusionCounts::new(25, 25, 25, 25)).unwrap(), 0.0);
        assert_eq!(kappa(&ConfusionCounts::new(5, 0, 5, 0)).unwrap(), 1.0);
        assert!(kappa(&ConfusionCounts::default()).is_err());
        // everything in one cell: chance agreement is 1
        assert_eq!(kappa(&ConfusionCounts::new(10, 0, 0, 0)).unwrap(), 0.0);
    }

    #[test]
    fn confusion_from_thresholded_probs() {
        let labels = [1, 1, 0, 0, 1];
        let probs = [0.9, 0.2, 0.6, 0.1, 0.5];
        let c = ConfusionCounts::from_probs(&labels, &probs, 0.5);
        assert_eq!(c, ConfusionCounts::new(2, 1, 1, 1));
        let r = classification_metrics(&labels, &probs, 0.5).unwrap();
        assert!((r.accuracy - 0.6).abs() < 1e-15);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert_eq!(auc(&[0, 1], &[0.1, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&[0, 1, 0, 1], &[0.3; 4]).unwrap(), 0.5);
        assert!(matches!(auc(&[1, 1], &[0.1, 0.2]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn regression_examples() {
        let r = regression_metrics(&[0.0, 1.0, 2.0], &[0.0, 1.0, 4.0]).unwrap();
        assert!((r.rmse - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r.mae - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.r2, Some(-1.0));
        let r = regression_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.r2, Some(0.0));
        let r = regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.rmse, r.mae, r.r2), (0.0, 0.0, Some(1.0)));
        assert_eq!(regression_metrics(&[1.0, 1.0], &[0.0, 1.0]).unwrap().r2, None);
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn delong_identical_and_symmetric() {
        let labels = [0, 1, 0, 1, 1, 0, 1, 0];
        let a = [0.1, 0.8, 0.3, 0.6, 0.9, 0.4, 0.35, 0.2];
        let b = [0.2, 0.7, 0.1, 0.3, 0.8, 0.6, 0.5, 0.1];
        let same = delong_test(&labels, &a, &a).unwrap();
        assert_eq!((same.z, same.p_value), (0.0, 1.0));
        let ab = delong_test(&labels, &a, &b).unwrap();
        let ba = delong_test(&labels, &b, &a).unwrap();
        assert!((ab.z + ba.z).abs() < 1e-12);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn delong_variance_matches_pairwise_oracle() {
        // Direct O(mn) computation of the structural components.
        let labels = [0, 1, 0, 1, 1, 0, 1, 0, 1];
        let a = [0.1, 0.8, 0.3, 0.6, 0.9, 0.4, 0.35, 0.35, 0.5];
        let b = [0.2, 0.7, 0.1, 0.3, 0.8, 0.6, 0.5, 0.1, 0.5];
        let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
        let comps = |s: &[f64]| {
            let pos: Vec<f64> = (0..9).filter(|&i| labels[i] == 1).map(|i| s[i]).collect();
            let neg: Vec<f64> = (0..9).filter(|&i| labels[i] == 0).map(|i| s[i]).collect();
            let v10: Vec<f64> = pos.iter().map(|&p| neg.iter().map(|&q| psi(p, q)).sum::<f64>() / neg.len() as f64).collect();
            let v01: Vec<f64> = neg.iter().map(|&q| pos.iter().map(|&p| psi(p, q)).sum::<f64>() / pos.len() as f64).collect();
            (v10, v01)
        };
        let (a10, a01) = comps(&a);
        let (b10, b01) = comps(&b);
        let (fa10, fa01) = structural_components(&labels, &a);
        for (x, y) in a10.iter().zip(&fa10).chain(a01.iter().zip(&fa01)) {
            assert!((x - y).abs() < 1e-12);
        }
        let d10: Vec<f64> = a10.iter().zip(&b10).map(|(x, y)| x - y).collect();
        let d01: Vec<f64> = a01.iter().zip(&b01).map(|(x, y)| x - y).collect();
        let var = covariance(&d10, &d10) / 5.0 + covariance(&d01, &d01) / 4.0;
        let r = delong_test(&labels, &a, &b).unwrap();
        assert!((r.var_diff - var).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let ci = bootstrap_ci(50, |_| Some(3.0), 200, 1).unwrap();
        assert_eq!((ci.lower, ci.point, ci.upper), (3.0, 3.0, 3.0));
        let labels: Vec<u8> = (0..60).map(|i| (i % 3 == 0) as u8).collect();
        let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 61) as f64 / 61.0 + f64::from(labels[i]) * 0.3).collect();
        let a = bootstrap_auc(&labels, &scores, 300, 9).unwrap();
        let b = bootstrap_auc(&labels, &scores, 300, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.lower <= a.point && a.point <= a.upper);
    }

    #[test]
    fn bootstrap_reports_too_few_valid() {
        let err = bootstrap_ci(10, |idx| (idx[0] == usize::MAX).then_some(1.0).or(if idx.len() == 10 && idx == (0..10).collect::<Vec<_>>() { Some(0.0) } else { None }), 150, 3);
        assert!(matches!(err, Err(Error::TooFewResamples { valid: 0, requested: 150 })));
    }

    #[test]
    fn psi_identity_and_boundary() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.7).sin()).collect();
        let v = psi(&xs, &xs, 10).unwrap();
        assert_eq!(v.psi, 0.0);
        assert!(!psi_flagged(v.psi));
        assert!(!psi_flagged(0.25));
        assert!(psi_flagged(0.25 + 1e-12));
    }

    #[test]
    fn psi_bins_follow_expected_deciles() {
        let xs: Vec<f64> = (0..100).map(f64::from).collect();
        let v = psi(&xs, &xs, 10).unwrap();
        assert_eq!(v.edges.len(), 9);
        assert!(v.expected_proportions.iter().all(|&p| (p - 0.1).abs() < 1e-12));
    }

    #[test]
    fn calibration_bins() {
        let c = calibration_curve(&[0, 1, 1, 0], &[0.05, 0.95, 0.9, 0.12], 10).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[2].count, 2);
        assert_eq!(c[2].observed_rate, 1.0);
    }

    #[test]
    fn roc_endpoints() {
        let r = roc_curve(&[0, 1, 0, 1], &[0.1, 0.9, 0.4, 0.3]).unwrap();
        assert_eq!((r[0].fpr, r[0].tpr), (0.0, 0.0));
        let last = r.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn auc_formulations_agree(pairs in proptest::collection::vec((0u8..2, 0u8..6), 2..60)) {
            let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.1) / 5.0).collect();
            let mw = auc(&labels, &scores);
            let tr = auc_trapezoid(&labels, &scores);
            match (mw, tr) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "disagreement {other:?}"),
            }
        }

        #[test]
        fn kappa_is_bounded(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            let c = ConfusionCounts::new(tp, fp, tn, fn_);
            prop_assume!(c.total() > 0);
            let k = kappa(&c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&k));
        }

        #[test]
        fn psi_is_non_negative(a in proptest::collection::vec(-5.0f64..5.0, 5..80), b in proptest::collection::vec(-5.0f64..5.0, 5..80)) {
            prop_assert!(psi(&a, &b, 10).unwrap().psi >= 0.0);
            prop_assert!(psi(&b, &a, 10).unwrap().psi >= 0.0);
        }
    }
}
