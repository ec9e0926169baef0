//! Isotonic (pool-adjacent-violators) and two-parameter logistic
//! calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    /// Ascending distinct training scores.
    pub breakpoints: Vec<f64>,
    /// Non-decreasing fitted values at the breakpoints.
    pub values: Vec<f64>,
}

fn check_binary(scores: &[f64], labels: &[u8], what: &'static str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.len() < 2 {
        return Err(Error::InvalidInput(format!("{what} needs at least two samples")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass(what));
    }
    Ok(())
}

/// Least-squares non-decreasing fit of `targets` against `scores` (equal
/// scores share one value). Returns distinct scores and fitted values.
pub fn pav(scores: &[f64], targets: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // tie groups: (score, sum, weight)
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += targets[i];
                g.2 += 1.0;
            }
            _ => groups.push((scores[i], targets[i], 1.0)),
        }
    }
    // blocks: (sum, weight, number of groups)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(groups.len());
    for &(_, s, w) in &groups {
        blocks.push((s, w, 1));
        while blocks.len() >= 2 {
            let (s2, w2, c2) = blocks[blocks.len() - 1];
            let (s1, w1, c1) = blocks[blocks.len() - 2];
            if s1 / w1 > s2 / w2 {
                blocks.pop();
                *blocks.last_mut().expect("two blocks") = (s1 + s2, w1 + w2, c1 + c2);
            } else {
                break;
            }
        }
    }
    let mut values = Vec::with_capacity(groups.len());
    for (s, w, c) in blocks {
        values.extend(std::iter::repeat_n(s / w, c));
    }
    (groups.into_iter().map(|g| g.0).collect(), values)
}

pub fn fit_isotonic(scores: &[f64], labels: &[u8]) -> Result<IsotonicMap> {
    check_binary(scores, labels, "isotonic calibration")?;
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let (breakpoints, values) = pav(scores, &targets);
    Ok(IsotonicMap { breakpoints, values })
}

impl IsotonicMap {
    /// Right-continuous step function, constant outside the fitted range.
    pub fn apply(&self, s: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&b| b <= s);
        self.values[k.saturating_sub(1)]
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }
}

pub const MAX_SLOPE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticCalibration {
    pub a: f64,
    pub b: f64,
    pub iterations: usize,
    /// Set when the slope hit the `|a| <= 30` cap.
    pub slope_capped: bool,
}

impl LogisticCalibration {
    pub fn apply(&self, s: f64) -> f64 {
        sigmoid(self.a * s + self.b)
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }
}

fn log_likelihood(a: f64, b: f64, s: &[f64], y: &[f64]) -> f64 {
    s.iter()
        .zip(y)
        .map(|(&s, &y)| {
            let z = a * s + b;
            // log sigma(z) = -softplus(-z)
            let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            -(y * softplus(-z) + (1.0 - y) * softplus(z))
        })
        .sum()
}

/// Maximum-likelihood `(a, b)` for `P(default) = sigma(a s + b)` by damped
/// Newton steps (gradient-norm tolerance 1e-10, at most 100 iterations).
pub fn fit_logistic_calibration(scores: &[f64], labels: &[u8]) -> Result<LogisticCalibration> {
    check_binary(scores, labels, "logistic calibration")?;
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let mut ll = log_likelihood(a, b, scores, &y);
    let mut iterations = 0;
    let mut capped = false;
    for it in 0..100 {
        iterations = it + 1;
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&s, &t) in scores.iter().zip(&y) {
            let p = sigmoid(a * s + b);
            let r = t - p;
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        if (ga * ga + gb * gb).sqrt() < 1e-10 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det.abs() > 1e-300 * (haa * hbb).abs().max(1.0) && det > 0.0 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else if hbb > 0.0 {
            (0.0, gb / hbb)
        } else {
            (ga, gb)
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let (na, nb) = (a + step * da, b + step * db);
            let nll = log_likelihood(na, nb, scores, &y);
            if nll >= ll {
                a = na;
                b = nb;
                ll = nll;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if a.abs() > MAX_SLOPE {
            capped = true;
            a = a.signum() * MAX_SLOPE;
            // refit the intercept with the slope held at the cap
            for _ in 0..100 {
                let (mut gb, mut hbb) = (0.0, 0.0);
                for (&s, &t) in scores.iter().zip(&y) {
                    let p = sigmoid(a * s + b);
                    gb += t - p;
                    hbb += p * (1.0 - p);
                }
                if gb.abs() < 1e-10 || hbb <= 0.0 {
                    break;
                }
                b += gb / hbb;
            }
            log::warn!("logistic calibration: data are (nearly) separable, slope capped at {MAX_SLOPE}");
            break;
        }
        if !moved {
            break;
        }
    }
    Ok(LogisticCalibration {
        a,
        b,
        iterations,
        slope_capped: capped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn violators_are_pooled() {
        let m = fit_isotonic(&[0.2, 0.8], &[1, 0]).unwrap();
        assert_eq!(m.values, vec![0.5, 0.5]);
    }

    #[test]
    fn monotone_labels_are_untouched() {
        let m = fit_isotonic(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.values, vec![0.0, 0.0, 1.0, 1.0]);
        // tie groups keep their empirical rate
        let m = fit_isotonic(&[0.1, 0.1, 0.5, 0.5], &[0, 1, 1, 1]).unwrap();
        assert_eq!(m.values, vec![0.5, 1.0]);
    }

    #[test]
    fn step_function_clamps_and_is_right_continuous() {
        let m = IsotonicMap {
            breakpoints: vec![0.2, 0.5],
            values: vec![0.1, 0.7],
        };
        assert_eq!(m.apply(-1.0), 0.1);
        assert_eq!(m.apply(0.2), 0.1);
        assert_eq!(m.apply(0.49), 0.1);
        assert_eq!(m.apply(0.5), 0.7);
        assert_eq!(m.apply(9.0), 0.7);
    }

    #[test]
    fn single_class_rejected() {
        assert!(fit_isotonic(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(fit_logistic_calibration(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn intercept_only_recovers_base_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<u8> = (0..1000).map(|_| u8::from(rng.gen::<f64>() < 0.3)).collect();
        let c = fit_logistic_calibration(&s, &y).unwrap();
        assert!(c.a.abs() < 0.5, "{c:?}");
        assert!((sigmoid(c.b + c.a * 0.5) - 0.3).abs() < 0.05);
        assert_eq!(LogisticCalibration { a: 1.0, b: 0.0, iterations: 0, slope_capped: false }.apply(0.0), 0.5);
    }

    #[test]
    fn separable_data_caps_the_slope() {
        let s = [0.0, 0.1, 0.2, 0.8, 0.9, 1.0];
        let y = [0, 0, 0, 1, 1, 1];
        let c = fit_logistic_calibration(&s, &y).unwrap();
        assert!(c.slope_capped);
        assert_eq!(c.a, MAX_SLOPE);
        let p = c.apply_all(&s);
        assert!(p.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn newton_matches_gradient_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..400).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<u8> = s.iter().map(|&v| u8::from(rng.gen::<f64>() < sigmoid(1.5 * v - 0.5))).collect();
        let c = fit_logistic_calibration(&s, &y).unwrap();
        let (mut ga, mut gb) = (0.0, 0.0);
        for (&v, &t) in s.iter().zip(&y) {
            let r = f64::from(t) - c.apply(v);
            ga += r * v;
            gb += r;
        }
        assert!(ga.abs() < 1e-8 && gb.abs() < 1e-8, "{ga} {gb}");
        assert!(!c.slope_capped);
    }
}
