//! Convex ensemble weights found by a deterministic simplex search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auc;

/// Grid resolution of the initial simplex scan.
pub const GRID_STEPS: usize = 20;
const GOLDEN_ITERS: usize = 40;
const REFINE_PASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub weights: Vec<f64>,
    /// Objective at the chosen weights (AUC, or RMSE for regression).
    pub objective: f64,
}

impl EnsembleWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0 / k as f64; k],
            objective: f64::NAN,
        }
    }

    pub fn combine(&self, preds: &[Vec<f64>]) -> Vec<f64> {
        combine(&self.weights, preds)
    }
}

pub fn combine(w: &[f64], preds: &[Vec<f64>]) -> Vec<f64> {
    let n = preds.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| w.iter().zip(preds).map(|(wk, p)| wk * p[i]).sum())
        .collect()
}

/// All points of the simplex grid with resolution `1 / steps`, in
/// lexicographic order of their integer coordinates.
pub fn simplex_grid(k: usize, steps: usize) -> Vec<Vec<f64>> {
    fn go(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in (0..=left).rev() {
            cur.push(v);
            go(k - 1, left - v, cur, out);
            cur.pop();
        }
    }
    let mut ints = Vec::new();
    go(k, steps, &mut Vec::new(), &mut ints);
    ints.into_iter()
        .map(|p| p.into_iter().map(|v| v as f64 / steps as f64).collect())
        .collect()
}

fn normalize(w: &mut [f64]) {
    for v in w.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
}

fn dist_to_uniform(w: &[f64]) -> f64 {
    let u = 1.0 / w.len() as f64;
    w.iter().map(|v| (v - u).powi(2)).sum()
}

/// Point on the segment from the opposite face to vertex `i`: weight `t` on
/// model `i`, the rest shared in the current proportions.
fn move_along(w: &[f64], i: usize, t: f64) -> Vec<f64> {
    let rest = 1.0 - w[i];
    let k = w.len();
    let mut out: Vec<f64> = w
        .iter()
        .map(|&v| if rest > 0.0 { v / rest * (1.0 - t) } else { (1.0 - t) / (k - 1) as f64 })
        .collect();
    out[i] = t;
    normalize(&mut out);
    out
}

/// Maximizes `score` over the probability simplex: grid scan at 1/20, then
/// coordinate-wise golden-section refinement accepting strict improvements.
/// Among equal grid scores the point closest to uniform wins.
pub fn maximize_on_simplex<F: Fn(&[f64]) -> f64>(k: usize, score: F) -> EnsembleWeights {
    if k == 1 {
        return EnsembleWeights {
            weights: vec![1.0],
            objective: score(&[1.0]),
        };
    }
    let mut best_w = vec![1.0 / k as f64; k];
    let mut best = score(&best_w);
    for w in simplex_grid(k, GRID_STEPS) {
        let s = score(&w);
        if s > best || (s == best && dist_to_uniform(&w) < dist_to_uniform(&best_w)) {
            best = s;
            best_w = w;
        }
    }
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..REFINE_PASSES {
        for i in 0..k {
            let f = |t: f64| score(&move_along(&best_w, i, t));
            let (mut a, mut b) = (0.0, 1.0);
            let mut c = b - phi * (b - a);
            let mut d = a + phi * (b - a);
            let (mut fc, mut fd) = (f(c), f(d));
            for _ in 0..GOLDEN_ITERS {
                if fc >= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - phi * (b - a);
                    fc = f(c);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + phi * (b - a);
                    fd = f(d);
                }
            }
            let t = (a + b) / 2.0;
            let cand = move_along(&best_w, i, t);
            let s = score(&cand);
            if s > best {
                best = s;
                best_w = cand;
            }
        }
    }
    normalize(&mut best_w);
    EnsembleWeights {
        objective: score(&best_w),
        weights: best_w,
    }
}

fn check_members(preds: &[Vec<f64>], n: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("ensemble needs at least one model".into()));
    }
    for p in preds {
        if p.len() != n {
            return Err(Error::LengthMismatch { left: n, right: p.len() });
        }
    }
    Ok(())
}

/// Non-negative weights summing to one that maximize validation AUC of the
/// weighted average.
pub fn optimize_weights(val_preds: &[Vec<f64>], labels: &[u8]) -> Result<EnsembleWeights> {
    check_members(val_preds, labels.len())?;
    auc(labels, &val_preds[0])?;
    Ok(maximize_on_simplex(val_preds.len(), |w| {
        auc(labels, &combine(w, val_preds)).expect("both classes checked")
    }))
}

/// Regression analogue: weights minimizing validation RMSE. The reported
/// objective is the RMSE.
pub fn optimize_weights_rmse(val_preds: &[Vec<f64>], y: &[f64]) -> Result<EnsembleWeights> {
    check_members(val_preds, y.len())?;
    let rmse = |w: &[f64]| {
        let p = combine(w, val_preds);
        (p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
    };
    let mut out = maximize_on_simplex(val_preds.len(), |w| -rmse(w));
    out.objective = -out.objective;
    Ok(out)
}
