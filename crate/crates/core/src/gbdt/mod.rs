//! Histogram gradient-boosted decision trees with three growth strategies:
//! oblivious (one split per level), best-first leaf-wise, and level-wise.

mod binning;
mod grow;
mod tree;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use binning::BinMapper;
pub use tree::{Node, Tree};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::stats::{self, sigmoid};
use grow::{grow_tree, GrowInput, Regularization};

pub const FORMAT_VERSION: u32 = 1;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMode {
    /// Every node of a level shares one (feature, threshold) split.
    Symmetric,
    /// Best-first expansion bounded by `num_leaves`.
    LeafWise,
    /// Level-by-level expansion bounded by `max_depth`.
    DepthWise,
}

impl GrowthMode {
    pub const ALL: [GrowthMode; 3] = [GrowthMode::Symmetric, GrowthMode::LeafWise, GrowthMode::DepthWise];

    pub fn name(self) -> &'static str {
        match self {
            GrowthMode::Symmetric => "symmetric",
            GrowthMode::LeafWise => "leafwise",
            GrowthMode::DepthWise => "depthwise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "symmetric" | "oblivious" => Some(GrowthMode::Symmetric),
            "leafwise" => Some(GrowthMode::LeafWise),
            "depthwise" => Some(GrowthMode::DepthWise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    LogLoss,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub growth_mode: GrowthMode,
    pub loss: Loss,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Depth limit for the symmetric and depth-wise modes.
    pub max_depth: usize,
    /// Leaf limit for the leaf-wise mode.
    pub num_leaves: usize,
    pub subsample: f64,
    pub feature_fraction: f64,
    pub l1: f64,
    pub l2: f64,
    pub min_child_weight: f64,
    /// 0 disables early stopping.
    pub early_stopping_rounds: usize,
    pub histogram_bins: usize,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self::preset(GrowthMode::DepthWise, Loss::LogLoss)
    }
}

impl GbdtConfig {
    pub fn preset(growth_mode: GrowthMode, loss: Loss) -> Self {
        let (iterations, learning_rate, max_depth, num_leaves) = match growth_mode {
            GrowthMode::Symmetric => (300, 0.05, 6, 64),
            GrowthMode::LeafWise => (300, 0.05, 6, 31),
            GrowthMode::DepthWise => (300, 0.05, 6, 64),
        };
        Self {
            growth_mode,
            loss,
            iterations,
            learning_rate,
            max_depth,
            num_leaves,
            subsample: 1.0,
            feature_fraction: 1.0,
            l1: 0.0,
            l2: 1.0,
            min_child_weight: 1.0,
            early_stopping_rounds: 0,
            histogram_bins: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad("feature_fraction must lie in (0, 1]");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0 && self.min_child_weight >= 0.0) {
            return bad("l1, l2 and min_child_weight must be non-negative");
        }
        if !(2..=256).contains(&self.histogram_bins) {
            return bad("histogram_bins must lie in [2, 256]");
        }
        if self.max_depth == 0 || self.num_leaves < 2 {
            return bad("max_depth must be >= 1 and num_leaves >= 2");
        }
        Ok(())
    }

    fn regularization(&self) -> Regularization {
        Regularization {
            l1: self.l1,
            l2: self.l2,
            min_child_weight: self.min_child_weight,
        }
    }
}

/// Per-row gradient and hessian of the loss at raw predictions `pred`.
pub fn loss_grad_hess(loss: Loss, y: &[f64], pred: &[f64]) -> (Vec<f64>, Vec<f64>) {
    y.iter()
        .zip(pred)
        .map(|(&y, &f)| grad_hess_one(loss, y, f))
        .unzip()
}

fn grad_hess_one(loss: Loss, y: f64, f: f64) -> (f64, f64) {
    match loss {
        Loss::LogLoss => {
            let p = sigmoid(f);
            (p - y, p * (1.0 - p))
        }
        Loss::SquaredError => (f - y, 1.0),
    }
}

/// Pointwise loss: `softplus(f) - y f` (cross-entropy in raw space) or
/// `(f - y)^2 / 2`.
pub fn loss_value(loss: Loss, y: f64, f: f64) -> f64 {
    match loss {
        Loss::LogLoss => {
            let softplus = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
            softplus - y * f
        }
        Loss::SquaredError => 0.5 * (f - y) * (f - y),
    }
}

pub fn mean_loss(loss: Loss, y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(&y, &f)| loss_value(loss, y, f)).sum::<f64>() / y.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Completed,
    EarlyStopped { at_iteration: usize },
    DegenerateTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stopping_reason: StopReason,
}

/// Tracks the best validation loss and signals when `rounds` iterations
/// pass without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    rounds: usize,
    best: f64,
    best_iteration: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(rounds: usize) -> Self {
        Self {
            rounds,
            best: f64::INFINITY,
            best_iteration: 0,
            seen: 0,
        }
    }

    /// Records the loss after the next iteration; returns `true` to stop.
    pub fn update(&mut self, loss: f64) -> bool {
        self.seen += 1;
        if loss < self.best {
            self.best = loss;
            self.best_iteration = self.seen;
        }
        self.rounds > 0 && self.seen - self.best_iteration >= self.rounds
    }

    /// 1-based iteration with the lowest loss so far.
    pub fn best_iteration(&self) -> usize {
        self.best_iteration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub version: u32,
    pub config: GbdtConfig,
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Number of leading trees used for prediction.
    pub best_iteration: usize,
    pub feature_names: Vec<String>,
}

impl GbdtModel {
    /// A model with the given trees, e.g. for hand-built examples.
    pub fn from_trees(feature_names: Vec<String>, config: GbdtConfig, base_score: f64, trees: Vec<Tree>) -> Self {
        let best_iteration = trees.len();
        Self {
            version: FORMAT_VERSION,
            config,
            base_score,
            trees,
            best_iteration,
            feature_names,
        }
    }

    pub fn loss(&self) -> Loss {
        self.config.loss
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    /// Trees that contribute to predictions.
    pub fn active_trees(&self) -> &[Tree] {
        &self.trees[..self.best_iteration.min(self.trees.len())]
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let lr = self.config.learning_rate;
        self.active_trees()
            .iter()
            .fold(self.base_score, |acc, t| acc + lr * t.predict(row))
    }

    pub fn check_columns(&self, rows: &FeatureMatrix) -> Result<()> {
        if rows.column_names != self.feature_names {
            return Err(Error::ColumnMismatch(format!(
                "model expects {:?}, got {:?}",
                self.feature_names, rows.column_names
            )));
        }
        Ok(())
    }

    pub fn predict_raw(&self, rows: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_columns(rows)?;
        Ok((0..rows.n_rows())
            .into_par_iter()
            .map(|i| self.predict_row(rows.row(i)))
            .collect())
    }

    pub fn predict_proba(&self, rows: &FeatureMatrix) -> Result<Vec<f64>> {
        if self.config.loss != Loss::LogLoss {
            return Err(Error::NotClassifier);
        }
        Ok(self.predict_raw(rows)?.into_iter().map(sigmoid).collect())
    }

    /// Probabilities for log-loss models, raw scores otherwise.
    pub fn predict_response(&self, rows: &FeatureMatrix) -> Result<Vec<f64>> {
        match self.config.loss {
            Loss::LogLoss => self.predict_proba(rows),
            Loss::SquaredError => self.predict_raw(rows),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: GbdtModel = serde_json::from_str(text)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(m)
    }

    /// SHA-256 of the JSON encoding.
    pub fn model_hash(&self) -> String {
        stats::sha256_hex(&serde_json::to_vec(self).expect("model serializes"))
    }
}

fn check_finite(x: &FeatureMatrix) -> Result<()> {
    if let Some(pos) = x.values().iter().position(|v| !v.is_finite()) {
        let m = x.n_cols().max(1);
        return Err(Error::NonFiniteFeature {
            row: pos / m,
            column: pos % m,
        });
    }
    Ok(())
}

fn check_targets(loss: Loss, y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite target {v}")));
    }
    if loss == Loss::LogLoss {
        if let Some(v) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("log-loss target {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Trains a model. `val` drives early stopping and the validation curve.
pub fn fit(
    train: &FeatureMatrix,
    y: &[f64],
    config: &GbdtConfig,
    val: Option<(&FeatureMatrix, &[f64])>,
) -> Result<(GbdtModel, TrainLog)> {
    config.validate()?;
    let n = train.n_rows();
    if n != y.len() {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if n < 2 {
        return Err(Error::InvalidInput("training needs at least two rows".into()));
    }
    check_finite(train)?;
    check_targets(config.loss, y)?;
    if let Some((vx, vy)) = val {
        if vx.column_names != train.column_names {
            return Err(Error::ColumnMismatch("validation columns differ from training columns".into()));
        }
        if vx.n_rows() != vy.len() {
            return Err(Error::LengthMismatch {
                left: vx.n_rows(),
                right: vy.len(),
            });
        }
        check_finite(vx)?;
        check_targets(config.loss, vy)?;
    } else if config.early_stopping_rounds > 0 {
        return Err(Error::Config("early stopping requires a validation set".into()));
    }

    let mean_y = stats::mean(y).expect("non-empty");
    let base_score = match config.loss {
        Loss::SquaredError => mean_y,
        Loss::LogLoss => stats::logit(mean_y.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)),
    };
    let mut model = GbdtModel {
        version: FORMAT_VERSION,
        config: config.clone(),
        base_score,
        trees: Vec::new(),
        best_iteration: 0,
        feature_names: train.column_names.clone(),
    };
    let mut log = TrainLog {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stopping_reason: StopReason::Completed,
    };
    if config.loss == Loss::LogLoss && (mean_y == 0.0 || mean_y == 1.0) {
        log::warn!("log-loss target holds a single class; returning a constant model");
        log.stopping_reason = StopReason::DegenerateTarget;
        return Ok((model, log));
    }

    let m = train.n_cols();
    let columns: Vec<Vec<f64>> = (0..m).map(|j| train.column(j)).collect();
    let mapper = BinMapper::fit(&columns, config.histogram_bins);
    let binned = mapper.transform(&columns);
    let reg = config.regularization();

    let mut pred = vec![base_score; n];
    let mut val_pred = val.map(|(vx, _)| vec![base_score; vx.n_rows()]);
    let mut stopper = EarlyStopper::new(config.early_stopping_rounds);
    let n_sub = ((n as f64 * config.subsample).round() as usize).clamp(1, n);
    let m_sub = ((m as f64 * config.feature_fraction).round() as usize).clamp(1, m.max(1));

    for it in 0..config.iterations {
        let (grad, hess) = loss_grad_hess(config.loss, y, &pred);
        let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(config.seed, &["gbdt", &it.to_string()]));
        let rows: Vec<u32> = if n_sub < n {
            let mut r: Vec<u32> = sample(&mut rng, n, n_sub).into_iter().map(|i| i as u32).collect();
            r.sort_unstable();
            r
        } else {
            (0..n as u32).collect()
        };
        let features: Vec<usize> = if m_sub < m {
            let mut f = sample(&mut rng, m, m_sub).into_vec();
            f.sort_unstable();
            f
        } else {
            (0..m).collect()
        };
        let input = GrowInput {
            binned: &binned,
            mapper: &mapper,
            grad: &grad,
            hess: &hess,
            features: &features,
            reg,
        };
        let tree = grow_tree(&input, rows, config.growth_mode, config.max_depth, config.num_leaves);
        let lr = config.learning_rate;
        pred.par_iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p += lr * tree.predict(train.row(i)));
        log.train_loss.push(mean_loss(config.loss, y, &pred));
        let mut stop = false;
        if let (Some((vx, vy)), Some(vp)) = (val, val_pred.as_mut()) {
            vp.par_iter_mut()
                .enumerate()
                .for_each(|(i, p)| *p += lr * tree.predict(vx.row(i)));
            let vl = mean_loss(config.loss, vy, vp);
            log.val_loss.push(vl);
            stop = stopper.update(vl);
        }
        model.trees.push(tree);
        if stop {
            log.stopping_reason = StopReason::EarlyStopped { at_iteration: it + 1 };
            break;
        }
    }
    model.best_iteration = if val.is_some() {
        stopper.best_iteration()
    } else {
        model.trees.len()
    };
    Ok((model, log))
}
