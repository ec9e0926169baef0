//! Tree-structured Parzen Estimator search over box-bounded spaces.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::gbdt::{GbdtConfig, GrowthMode};
use crate::stats;

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub scale: Scale,
    pub integer: bool,
}

impl Dimension {
    pub fn new(name: &str, low: f64, high: f64, scale: Scale, integer: bool) -> Self {
        Self {
            name: name.into(),
            low,
            high,
            scale,
            integer,
        }
    }

    fn warp(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => x,
            Scale::Log => x.ln(),
        }
    }

    /// Position of `x` in the unit interval of the warped range.
    pub fn to_unit(&self, x: f64) -> f64 {
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        ((self.warp(x) - a) / (b - a)).clamp(0.0, 1.0)
    }

    /// Inverse of `to_unit`, rounded for integer dimensions and clamped.
    pub fn from_unit(&self, u: f64) -> f64 {
        let (a, b) = (self.warp(self.low), self.warp(self.high));
        let w = a + u.clamp(0.0, 1.0) * (b - a);
        let x = match self.scale {
            Scale::Linear => w,
            Scale::Log => w.exp(),
        };
        let x = if self.integer { x.round() } else { x };
        x.clamp(self.low, self.high)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.low && x <= self.high && (!self.integer || x.fract() == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub name: String,
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(name: &str, dims: Vec<Dimension>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        for d in &dims {
            if !(d.low < d.high) {
                return Err(Error::Config(format!("dimension `{}` needs low < high", d.name)));
            }
            if d.scale == Scale::Log && d.low <= 0.0 {
                return Err(Error::Config(format!("log dimension `{}` must be positive", d.name)));
            }
        }
        Ok(Self { name: name.into(), dims })
    }

    /// The search ranges for each growth preset.
    pub fn for_preset(mode: GrowthMode) -> Self {
        let lr = Dimension::new("learning_rate", 1e-4, 0.3, Scale::Log, false);
        let dims = match mode {
            GrowthMode::Symmetric => vec![
                Dimension::new("iterations", 100.0, 2000.0, Scale::Linear, true),
                lr,
                Dimension::new("depth", 4.0, 10.0, Scale::Linear, true),
            ],
            GrowthMode::LeafWise => vec![
                Dimension::new("num_leaves", 31.0, 512.0, Scale::Linear, true),
                lr,
                Dimension::new("feature_fraction", 0.5, 1.0, Scale::Linear, false),
            ],
            GrowthMode::DepthWise => vec![
                Dimension::new("max_depth", 3.0, 12.0, Scale::Linear, true),
                lr,
                Dimension::new("subsample", 0.5, 1.0, Scale::Linear, false),
            ],
        };
        Self::new(mode.name(), dims).expect("preset spaces are valid")
    }

    pub fn contains(&self, p: &Params) -> bool {
        self.dims
            .iter()
            .all(|d| p.get(&d.name).is_some_and(|&x| d.contains(x)))
    }

    fn params_from_unit(&self, u: &[f64]) -> Params {
        self.dims
            .iter()
            .zip(u)
            .map(|(d, &u)| (d.name.clone(), d.from_unit(u)))
            .collect()
    }
}

/// Applies tuned values onto a base configuration. `depth` and `max_depth`
/// both set the depth limit; `eta` is an alias of `learning_rate`.
pub fn apply_params(base: &GbdtConfig, p: &Params) -> Result<GbdtConfig> {
    let mut c = base.clone();
    for (k, &v) in p {
        match k.as_str() {
            "iterations" => c.iterations = v as usize,
            "learning_rate" | "eta" => c.learning_rate = v,
            "depth" | "max_depth" => c.max_depth = v as usize,
            "num_leaves" => c.num_leaves = v as usize,
            "feature_fraction" => c.feature_fraction = v,
            "subsample" => c.subsample = v,
            "l1" => c.l1 = v,
            "l2" => c.l2 = v,
            "min_child_weight" => c.min_child_weight = v,
            other => return Err(Error::Config(format!("unknown hyperparameter `{other}`"))),
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Complete { value: f64 },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub number: usize,
    pub params: Params,
    pub status: TrialStatus,
}

impl Trial {
    pub fn value(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Complete { value } => Some(value),
            TrialStatus::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub seed: u64,
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub trials: Vec<Trial>,
}

impl StudyState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            trials: Vec::new(),
        }
    }

    /// Lowest completed objective; ties keep the earliest trial.
    pub fn best_trial(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.value().is_some())
            .fold(None, |best: Option<&Trial>, t| match best {
                Some(b) if b.value() <= t.value() => Some(b),
                _ => Some(t),
            })
    }

    pub fn record(&mut self, params: Params, outcome: Result<f64>) {
        let status = match outcome {
            Ok(v) if v.is_finite() => TrialStatus::Complete { value: v },
            Ok(v) => TrialStatus::Failed {
                error: format!("non-finite objective {v}"),
            },
            Err(e) => TrialStatus::Failed { error: e.to_string() },
        };
        let number = self.trials.len();
        self.trials.push(Trial { number, params, status });
    }

    pub fn state_hash(&self) -> String {
        stats::sha256_hex(&serde_json::to_vec(self).expect("study serializes"))
    }
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Truncated-normal Parzen mixture on [0, 1].
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// Normalizing mass of each component inside [0, 1].
    masses: Vec<f64>,
}

const PRIOR_MU: f64 = 0.5;
const PRIOR_SIGMA: f64 = 1.0;

impl Parzen {
    /// One component per observation plus a broad prior; each bandwidth is
    /// the larger gap to its neighbours, clipped to
    /// `[PRIOR_SIGMA / min(100, n + 1), PRIOR_SIGMA]`.
    fn new(obs: &[f64]) -> Self {
        let mut pts: Vec<(f64, bool)> = obs.iter().map(|&u| (u, false)).collect();
        pts.push((PRIOR_MU, true));
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = pts.len();
        let min_sigma = PRIOR_SIGMA / (100f64).min(n as f64);
        let mut mus = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        for i in 0..n {
            let (mu, is_prior) = pts[i];
            let sigma = if is_prior {
                PRIOR_SIGMA
            } else {
                let left = if i == 0 { mu } else { mu - pts[i - 1].0 };
                let right = if i + 1 == n { 1.0 - mu } else { pts[i + 1].0 - mu };
                left.max(right).clamp(min_sigma, PRIOR_SIGMA)
            };
            mus.push(mu);
            sigmas.push(sigma);
        }
        let masses = mus
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| (stats::normal_cdf((1.0 - m) / s) - stats::normal_cdf(-m / s)).max(1e-300))
            .collect();
        Self { mus, sigmas, masses }
    }

    fn log_pdf(&self, u: f64) -> f64 {
        let k = self.mus.len() as f64;
        let mut total = 0.0;
        for ((&m, &s), &z) in self.mus.iter().zip(&self.sigmas).zip(&self.masses) {
            let t = (u - m) / s;
            total += (-0.5 * t * t).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * z);
        }
        (total / k).max(1e-300).ln()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let k = rng.gen_range(0..self.mus.len());
        let (m, s) = (self.mus[k], self.sigmas[k]);
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let lo = normal.cdf(-m / s);
        let hi = normal.cdf((1.0 - m) / s);
        let p = lo + rng.gen::<f64>() * (hi - lo);
        (m + s * normal.inverse_cdf(p.clamp(1e-300, 1.0 - 1e-16))).clamp(0.0, 1.0)
    }
}

/// Next point to evaluate. The first `n_startup` trials follow a randomly
/// shifted Halton sequence; afterwards the candidate with the highest
/// good/bad density ratio among `n_candidates` draws is proposed.
pub fn suggest(state: &StudyState, space: &SearchSpace) -> Params {
    let t = state.trials.len();
    let completed: Vec<(&Trial, f64)> = state.trials.iter().filter_map(|tr| tr.value().map(|v| (tr, v))).collect();
    if t < state.n_startup || completed.len() < 2 {
        let u: Vec<f64> = space
            .dims
            .iter()
            .enumerate()
            .map(|(j, d)| {
                let shift = stats::derive_seed(state.seed, &["halton-shift", &d.name]) as f64 / u64::MAX as f64;
                (radical_inverse(t as u64 + 1, PRIMES[j % PRIMES.len()]) + shift).fract()
            })
            .collect();
        return space.params_from_unit(&u);
    }

    let mut ranked = completed;
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.number.cmp(&b.0.number)));
    let n_good = ((state.gamma * ranked.len() as f64).ceil() as usize).clamp(1, ranked.len() - 1);
    let (good, bad) = ranked.split_at(n_good);
    let unit = |set: &[(&Trial, f64)], d: &Dimension| -> Vec<f64> {
        set.iter().map(|(tr, _)| d.to_unit(tr.params[&d.name])).collect()
    };
    let models: Vec<(Parzen, Parzen)> = space
        .dims
        .iter()
        .map(|d| (Parzen::new(&unit(good, d)), Parzen::new(&unit(bad, d))))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(state.seed, &["tpe", &t.to_string()]));
    let mut best: Option<(f64, Params)> = None;
    for _ in 0..state.n_candidates.max(1) {
        let u: Vec<f64> = models.iter().map(|(l, _)| l.sample(&mut rng)).collect();
        let params = space.params_from_unit(&u);
        let score: f64 = space
            .dims
            .iter()
            .zip(&models)
            .map(|(d, (l, g))| {
                let v = d.to_unit(params[&d.name]);
                l.log_pdf(v) - g.log_pdf(v)
            })
            .sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, params));
        }
    }
    best.expect("at least one candidate").1
}

/// Minimizes `objective` over `n_trials` evaluations. Failed trials are
/// recorded and excluded from the density models.
pub fn run_study<F>(mut objective: F, space: &SearchSpace, n_trials: usize, seed: u64) -> Result<(Params, StudyState)>
where
    F: FnMut(&Params) -> Result<f64>,
{
    let mut state = StudyState::new(seed);
    for _ in 0..n_trials {
        let params = suggest(&state, space);
        let outcome = objective(&params);
        if let Err(e) = &outcome {
            log::warn!("trial {} failed: {e}", state.trials.len());
        }
        state.record(params, outcome);
    }
    let best = state
        .best_trial()
        .ok_or(Error::AllTrialsFailed(n_trials))?
        .params
        .clone();
    Ok((best, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_space() -> SearchSpace {
        SearchSpace::new("unit", vec![Dimension::new("x", 0.0, 1.0, Scale::Linear, false)]).unwrap()
    }

    #[test]
    fn suggestions_stay_in_bounds() {
        for mode in GrowthMode::ALL {
            let space = SearchSpace::for_preset(mode);
            let mut state = StudyState::new(5);
            for i in 0..200 {
                let p = suggest(&state, &space);
                assert!(space.contains(&p), "{mode:?} {p:?}");
                let v = p.values().map(|v| (v * 7.3 + i as f64).sin()).sum::<f64>();
                state.record(p, Ok(v));
            }
        }
    }

    #[test]
    fn startup_is_deterministic() {
        let space = SearchSpace::for_preset(GrowthMode::LeafWise);
        let a = suggest(&StudyState::new(11), &space);
        let b = suggest(&StudyState::new(11), &space);
        assert_eq!(a, b);
        assert_ne!(a, suggest(&StudyState::new(12), &space));
    }

    #[test]
    fn constant_objective_keeps_first_trial() {
        let (best, state) = run_study(|_| Ok(1.0), &unit_space(), 15, 3).unwrap();
        assert_eq!(best, state.trials[0].params);
        assert!(state.trials.iter().all(|t| t.value() == Some(1.0)));
    }

    #[test]
    fn failing_trials_are_recorded() {
        let space = SearchSpace::for_preset(GrowthMode::DepthWise);
        let (best, state) = run_study(
            |p| {
                if p["max_depth"] > 8.0 {
                    Err(Error::InvalidInput("too deep".into()))
                } else {
                    Ok(p["learning_rate"])
                }
            },
            &space,
            30,
            4,
        )
        .unwrap();
        assert_eq!(state.trials.len(), 30);
        assert!(state.trials.iter().any(|t| t.value().is_none()));
        assert!(best["max_depth"] <= 8.0);
        assert!(matches!(
            run_study(|_| Err(Error::InvalidInput("no".into())), &space, 3, 1),
            Err(Error::AllTrialsFailed(3))
        ));
    }

    #[test]
    fn same_seed_same_history() {
        let f = |p: &Params| Ok((p["x"] - 0.3).powi(2));
        let (_, a) = run_study(f, &unit_space(), 25, 8).unwrap();
        let (_, b) = run_study(f, &unit_space(), 25, 8).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
    }

    #[test]
    fn params_map_onto_config() {
        let base = GbdtConfig::default();
        let mut p = Params::new();
        p.insert("depth".into(), 7.0);
        p.insert("learning_rate".into(), 0.1);
        let c = apply_params(&base, &p).unwrap();
        assert_eq!((c.max_depth, c.learning_rate), (7, 0.1));
        p.insert("bogus".into(), 1.0);
        assert!(apply_params(&base, &p).is_err());
    }

    #[test]
    fn log_dimension_round_trip() {
        let d = Dimension::new("lr", 1e-4, 0.3, Scale::Log, false);
        assert!((d.from_unit(d.to_unit(0.01)) - 0.01).abs() < 1e-15);
        assert!((d.from_unit(0.5) - (1e-4f64 * 0.3).sqrt()).abs() < 1e-12);
    }
}
