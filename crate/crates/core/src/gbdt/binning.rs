//! Quantile histogram binning fixed on the training fold.

use serde::{Deserialize, Serialize};

/// Per-feature split thresholds. A value `x` falls in bin
/// `#{t in thresholds : t <= x}`, so "bin < s" is the same event as
/// `x < thresholds[s - 1]`, which is the rule trees use at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMapper {
    pub thresholds: Vec<Vec<f64>>,
}

impl BinMapper {
    /// At most `max_bins` bins per feature. Thresholds sit midway between
    /// consecutive distinct training values at (roughly) equal-count cuts.
    pub fn fit(columns: &[Vec<f64>], max_bins: usize) -> Self {
        let thresholds = columns
            .iter()
            .map(|col| feature_thresholds(col, max_bins))
            .collect();
        Self { thresholds }
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.thresholds[feature].len() + 1
    }

    pub fn bin(&self, feature: usize, x: f64) -> u8 {
        self.thresholds[feature].partition_point(|&t| t <= x) as u8
    }

    /// Column-major binned copy of the data.
    pub fn transform(&self, columns: &[Vec<f64>]) -> Vec<Vec<u8>> {
        columns
            .iter()
            .enumerate()
            .map(|(j, col)| col.iter().map(|&x| self.bin(j, x)).collect())
            .collect()
    }
}

fn feature_thresholds(col: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    let mid = |a: f64, b: f64| {
        let m = a + (b - a) / 2.0;
        // guard against the midpoint rounding onto the lower value
        if m > a {
            m
        } else {
            b
        }
    };
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| mid(w[0], w[1])).collect();
    }
    let n = sorted.len();
    let mut out: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for i in 1..max_bins {
        let mut idx = (i * n) / max_bins;
        // advance to the next change point so the cut separates two values
        while idx < n && idx > 0 && sorted[idx - 1] == sorted[idx] {
            idx += 1;
        }
        if idx == 0 || idx >= n {
            continue;
        }
        let t = mid(sorted[idx - 1], sorted[idx]);
        if out.last().is_none_or(|&last| t > last) {
            out.push(t);
        }
    }
    out
}
