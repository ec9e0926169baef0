//! Exact tree Shapley values, importance rankings and partial dependence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::{GbdtModel, Loss, Node, Tree};
use crate::matrix::FeatureMatrix;
use crate::metrics::auc;
use crate::stats;

/// Anything that maps a feature matrix to scores.
pub trait Predictor: Sync {
    fn feature_names(&self) -> &[String];
    /// Additive (pre-link) score.
    fn predict_raw(&self, x: &FeatureMatrix) -> Result<Vec<f64>>;
    /// Probabilities for classifiers, values for regressors.
    fn predict_response(&self, x: &FeatureMatrix) -> Result<Vec<f64>>;
}

impl Predictor for GbdtModel {
    fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    fn predict_raw(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        GbdtModel::predict_raw(self, x)
    }

    fn predict_response(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        GbdtModel::predict_response(self, x)
    }
}

/// Convex combination of models sharing one feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEnsemble {
    pub members: Vec<GbdtModel>,
    pub weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(members: Vec<GbdtModel>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(Error::InvalidInput("ensemble needs one weight per member".into()));
        }
        if members.iter().any(|m| m.feature_names != members[0].feature_names) {
            return Err(Error::ColumnMismatch("ensemble members use different features".into()));
        }
        Ok(Self { members, weights })
    }

    fn mix(&self, outputs: Vec<Vec<f64>>) -> Vec<f64> {
        crate::tune::combine(&self.weights, &outputs)
    }
}

impl Predictor for WeightedEnsemble {
    fn feature_names(&self) -> &[String] {
        &self.members[0].feature_names
    }

    fn predict_raw(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let outs = self.members.iter().map(|m| m.predict_raw(x)).collect::<Result<Vec<_>>>()?;
        Ok(self.mix(outs))
    }

    fn predict_response(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let outs = self
            .members
            .iter()
            .map(|m| m.predict_response(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.mix(outs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMatrix {
    pub base_value: f64,
    /// Row-major attributions, one row per input row.
    pub phi: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
}

impl ShapMatrix {
    /// `base + Σ φ` for every row.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.phi.iter().map(|r| self.base_value + r.iter().sum::<f64>()).collect()
    }

    pub fn write_delimited<W: std::io::Write>(&self, w: W, delimiter: u8) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().delimiter(delimiter).from_writer(w);
        let mut header = vec!["row".to_string(), "base_value".to_string()];
        header.extend(self.feature_names.iter().cloned());
        wr.write_record(&header)?;
        for (i, r) in self.phi.iter().enumerate() {
            let mut rec = vec![i.to_string(), self.base_value.to_string()];
            rec.extend(r.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let w = path[i].weight;
        path[i + 1].weight += one_fraction * w * (i as f64 + 1.0) / (d + 1.0);
        path[i].weight = zero_fraction * w * (d - i as f64) / (d + 1.0);
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            next = tmp - path[i].weight * zero * (d - i as f64) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero * (d - i as f64));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    if one != 0.0 {
        for i in (0..depth).rev() {
            let tmp = next / ((i as f64 + 1.0) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i as f64);
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight / (zero * (d - i as f64));
        }
    }
    total * (d + 1.0)
}

fn fraction(child: f64, parent: f64) -> f64 {
    if parent > 0.0 {
        child / parent
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    x: &[f64],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElement>,
    zero_fraction: f64,
    one_fraction: f64,
    feature: Option<usize>,
    scale: f64,
) {
    extend_path(&mut path, zero_fraction, one_fraction, feature);
    match &tree.nodes[node] {
        Node::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let el = path[i];
                let f = el.feature.expect("non-root path elements carry a feature");
                phi[f] += w * (el.one_fraction - el.zero_fraction) * value * scale;
            }
        }
        Node::Split {
            feature: split,
            threshold,
            left,
            right,
            cover,
            ..
        } => {
            let (hot, cold) = if x[*split] < *threshold { (*left, *right) } else { (*right, *left) };
            let hot_zero = fraction(tree.nodes[hot].cover(), *cover);
            let cold_zero = fraction(tree.nodes[cold].cover(), *cover);
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == Some(*split)) {
                in_zero = path[k].zero_fraction;
                in_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            // a branch with both fractions zero carries no weight on any
            // coalition, and would only divide by zero further down
            if hot_zero * in_zero > 0.0 || in_one > 0.0 {
                recurse(tree, x, phi, hot, path.clone(), hot_zero * in_zero, in_one, Some(*split), scale);
            }
            if cold_zero * in_zero > 0.0 {
                recurse(tree, x, phi, cold, path, cold_zero * in_zero, 0.0, Some(*split), scale);
            }
        }
    }
}

/// Cover-weighted mean leaf value of a tree.
pub fn tree_expectation(tree: &Tree) -> f64 {
    fn go(t: &Tree, i: usize) -> f64 {
        match &t.nodes[i] {
            Node::Leaf { value, .. } => *value,
            Node::Split { left, right, cover, .. } => {
                let (cl, cr) = (t.nodes[*left].cover(), t.nodes[*right].cover());
                if *cover > 0.0 {
                    (cl * go(t, *left) + cr * go(t, *right)) / cover
                } else {
                    0.0
                }
            }
        }
    }
    go(tree, 0)
}

/// Expected leaf value when the features in `known` are fixed to `x` and the
/// rest follow the training covers (the value function Shapley values of
/// tree models are defined against).
pub fn path_expectation(tree: &Tree, x: &[f64], known: &[bool]) -> f64 {
    fn go(t: &Tree, i: usize, x: &[f64], known: &[bool]) -> f64 {
        match &t.nodes[i] {
            Node::Leaf { value, .. } => *value,
            Node::Split {
                feature,
                threshold,
                left,
                right,
                cover,
                ..
            } => {
                if known[*feature] {
                    let next = if x[*feature] < *threshold { *left } else { *right };
                    go(t, next, x, known)
                } else {
                    let (cl, cr) = (t.nodes[*left].cover(), t.nodes[*right].cover());
                    if *cover > 0.0 {
                        (cl * go(t, *left, x, known) + cr * go(t, *right, x, known)) / cover
                    } else {
                        0.0
                    }
                }
            }
        }
    }
    go(tree, 0, x, known)
}

/// Exact Shapley values of a tree ensemble in raw-score space.
pub fn tree_shap(model: &GbdtModel, rows: &FeatureMatrix) -> Result<ShapMatrix> {
    model.check_columns(rows)?;
    let lr = model.learning_rate();
    let m = model.feature_names.len();
    let trees = model.active_trees();
    let base_value = model.base_score + trees.iter().map(|t| lr * tree_expectation(t)).sum::<f64>();
    let phi = (0..rows.n_rows())
        .into_par_iter()
        .map(|i| {
            let x = rows.row(i);
            let mut phi = vec![0.0; m];
            for t in trees {
                let depth = t.depth();
                recurse(t, x, &mut phi, 0, Vec::with_capacity(depth + 2), 1.0, 1.0, None, lr);
            }
            phi
        })
        .collect();
    Ok(ShapMatrix {
        base_value,
        phi,
        feature_names: model.feature_names.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    /// Descending by score; ties keep feature order.
    pub entries: Vec<ImportanceEntry>,
    pub provenance: Vec<String>,
}

impl ImportanceRanking {
    pub fn from_scores(names: &[String], scores: &[f64], provenance: Vec<String>) -> Self {
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self {
            entries: order
                .into_iter()
                .map(|j| ImportanceEntry {
                    feature: names[j].clone(),
                    score: scores[j],
                })
                .collect(),
            provenance,
        }
    }

    pub fn features(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.feature.as_str()).collect()
    }

    pub fn top(&self, k: usize) -> Vec<&str> {
        self.features().into_iter().take(k).collect()
    }

    pub fn score_of(&self, feature: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.feature == feature).map(|e| e.score)
    }
}

/// Mean |φ| per feature over every row of every input.
pub fn aggregate_importance(sets: &[ShapMatrix]) -> Result<ImportanceRanking> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidInput("no attribution sets to aggregate".into()))?;
    let names = &first.feature_names;
    if sets.iter().any(|s| &s.feature_names != names) {
        return Err(Error::ColumnMismatch("attribution sets use different features".into()));
    }
    let mut sums = vec![0.0; names.len()];
    let mut n = 0usize;
    for s in sets {
        for row in &s.phi {
            for (acc, v) in sums.iter_mut().zip(row) {
                *acc += v.abs();
            }
            n += 1;
        }
    }
    let scores: Vec<f64> = sums.iter().map(|s| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    Ok(ImportanceRanking::from_scores(
        names,
        &scores,
        vec![format!("mean |shap| over {} sets, {n} rows", sets.len())],
    ))
}

/// Mean score per feature over rankings whose feature sets may differ (a
/// feature absent from a ranking counts as 0 there). Ties keep the order in
/// which features are first seen.
pub fn merge_rankings(rankings: &[ImportanceRanking], label: &str) -> Result<ImportanceRanking> {
    if rankings.is_empty() {
        return Err(Error::InvalidInput("no rankings to merge".into()));
    }
    let mut names: Vec<String> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for r in rankings {
        for e in &r.entries {
            match names.iter().position(|n| *n == e.feature) {
                Some(j) => sums[j] += e.score,
                None => {
                    names.push(e.feature.clone());
                    sums.push(e.score);
                }
            }
        }
    }
    let k = rankings.len() as f64;
    let scores: Vec<f64> = sums.iter().map(|s| s / k).collect();
    let mut provenance = vec![format!("{label}: mean over {} rankings", rankings.len())];
    provenance.extend(rankings.iter().flat_map(|r| r.provenance.iter().cloned()));
    Ok(ImportanceRanking::from_scores(&names, &scores, provenance))
}

/// Attributions of a weighted sum of models: `Σ w_m φ_m`, with the base
/// value combined the same way. Local accuracy carries over to the weighted
/// raw score.
pub fn weighted_shap(members: &[GbdtModel], weights: &[f64], rows: &FeatureMatrix) -> Result<ShapMatrix> {
    if members.is_empty() || members.len() != weights.len() {
        return Err(Error::InvalidInput("weighted attribution needs one weight per model".into()));
    }
    let mut out: Option<ShapMatrix> = None;
    for (m, &w) in members.iter().zip(weights) {
        let s = tree_shap(m, rows)?;
        match out.as_mut() {
            None => {
                out = Some(ShapMatrix {
                    base_value: w * s.base_value,
                    phi: s.phi.iter().map(|r| r.iter().map(|v| w * v).collect()).collect(),
                    feature_names: s.feature_names,
                })
            }
            Some(acc) => {
                if acc.feature_names != s.feature_names {
                    return Err(Error::ColumnMismatch("ensemble members use different features".into()));
                }
                acc.base_value += w * s.base_value;
                for (a, r) in acc.phi.iter_mut().zip(&s.phi) {
                    for (x, v) in a.iter_mut().zip(r) {
                        *x += w * v;
                    }
                }
            }
        }
    }
    Ok(out.expect("at least one member"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Rmse,
}

impl Metric {
    pub fn for_loss(loss: Loss) -> Self {
        match loss {
            Loss::LogLoss => Metric::Auc,
            Loss::SquaredError => Metric::Rmse,
        }
    }

    fn evaluate(self, labels: &[f64], preds: &[f64]) -> Result<f64> {
        match self {
            Metric::Auc => {
                let y: Vec<u8> = labels.iter().map(|&v| u8::from(v >= 0.5)).collect();
                auc(&y, preds)
            }
            Metric::Rmse => Ok(crate::metrics::regression_metrics(labels, preds)?.rmse),
        }
    }

    /// Positive when `permuted` is worse than `baseline`.
    fn degradation(self, baseline: f64, permuted: f64) -> f64 {
        match self {
            Metric::Auc => baseline - permuted,
            Metric::Rmse => permuted - baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationImportance {
    pub metric: Metric,
    pub baseline: f64,
    /// Mean degradation per feature, in feature order (may be negative).
    pub mean: Vec<f64>,
    /// `per_repeat[j][r]`: degradation of feature `j` in repeat `r`.
    pub per_repeat: Vec<Vec<f64>>,
    /// Ranking by mean degradation, negatives reported as 0.
    pub ranking: ImportanceRanking,
}

/// Metric degradation when one column at a time is shuffled. The shuffle of
/// (feature j, repeat r) uses its own derived seed, so results do not depend
/// on scheduling or on the number of repeats requested.
pub fn permutation_importance<P: Predictor + ?Sized>(
    model: &P,
    data: &FeatureMatrix,
    labels: &[f64],
    metric: Metric,
    repeats: usize,
    seed: u64,
) -> Result<PermutationImportance> {
    if repeats == 0 {
        return Err(Error::InvalidInput("repeats must be at least 1".into()));
    }
    if labels.len() != data.n_rows() {
        return Err(Error::LengthMismatch {
            left: data.n_rows(),
            right: labels.len(),
        });
    }
    let baseline = metric.evaluate(labels, &model.predict_response(data)?)?;
    let names = model.feature_names().to_vec();
    let per_repeat = (0..data.n_cols())
        .into_par_iter()
        .map(|j| {
            (0..repeats)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(
                        seed,
                        &["permutation", &j.to_string(), &r.to_string()],
                    ));
                    let mut col = data.column(j);
                    col.shuffle(&mut rng);
                    let mut shuffled = data.clone();
                    for (i, v) in col.into_iter().enumerate() {
                        shuffled.set(i, j, v);
                    }
                    let permuted = metric.evaluate(labels, &model.predict_response(&shuffled)?)?;
                    Ok(metric.degradation(baseline, permuted))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mean: Vec<f64> = per_repeat.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let clipped: Vec<f64> = mean.iter().map(|&v| v.max(0.0)).collect();
    Ok(PermutationImportance {
        metric,
        baseline,
        ranking: ImportanceRanking::from_scores(
            &names,
            &clipped,
            vec![format!("permutation importance ({metric:?}, {repeats} repeats)")],
        ),
        mean,
        per_repeat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpCurve {
    pub feature: String,
    pub grid: Vec<f64>,
    pub response: Vec<f64>,
}

/// Mean raw prediction with `feature` overwritten by each grid value.
pub fn partial_dependence<P: Predictor + ?Sized>(
    model: &P,
    feature: &str,
    grid: &[f64],
    data: &FeatureMatrix,
) -> Result<PdpCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("partial dependence grid is empty".into()));
    }
    let j = data
        .column_index(feature)
        .ok_or_else(|| Error::UnknownColumn(feature.to_string()))?;
    let mut grid = stats::sorted_copy(grid);
    grid.dedup();
    let response = grid
        .iter()
        .map(|&g| {
            let mut x = data.clone();
            for i in 0..x.n_rows() {
                x.set(i, j, g);
            }
            let p = model.predict_raw(&x)?;
            Ok(stats::mean(&p).unwrap_or(0.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PdpCurve {
        feature: feature.to_string(),
        grid,
        response,
    })
}

/// `n` evenly spaced quantiles (5%..95%) of a column, deduplicated.
pub fn quantile_grid(data: &FeatureMatrix, feature: &str, n: usize) -> Result<Vec<f64>> {
    let j = data
        .column_index(feature)
        .ok_or_else(|| Error::UnknownColumn(feature.to_string()))?;
    let sorted = stats::sorted_copy(&data.column(j));
    let n = n.max(1);
    let mut g: Vec<f64> = (0..n)
        .map(|k| {
            let q = if n == 1 { 0.5 } else { 0.05 + 0.9 * k as f64 / (n - 1) as f64 };
            stats::quantile_sorted(&sorted, q).unwrap_or(0.0)
        })
        .collect();
    g.dedup();
    Ok(g)
}

/// Spearman correlation of two rankings over their shared features.
pub fn ranking_agreement(a: &ImportanceRanking, b: &ImportanceRanking) -> Option<f64> {
    let (sa, sb): (Vec<f64>, Vec<f64>) = a
        .entries
        .iter()
        .filter_map(|e| b.score_of(&e.feature).map(|s| (e.score, s)))
        .unzip();
    stats::spearman(&sa, &sb)
}
