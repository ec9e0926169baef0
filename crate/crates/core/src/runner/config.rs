use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbdt::GrowthMode;
use crate::ingest::{Agency, SchemaMap};
use crate::preprocess::PreprocessPolicy;
use crate::targets::TargetMode;

/// Everything a run needs. Loaded from JSON; omitted fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_path: PathBuf,
    /// Column-role map; the built-in map for the public export when absent.
    pub schema_path: Option<PathBuf>,
    pub delimiter: char,
    /// Agency names or short ids (`moodys`, `fitch`, `sp`, `egan_jones`).
    pub agencies: Vec<String>,
    /// One pipeline per target mode; listing both gives classification and
    /// regression results from one run.
    pub targets: Vec<TargetMode>,
    pub rank_rescale: bool,
    pub folds: usize,
    pub presets: Vec<GrowthMode>,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub firm_disjoint: bool,
    /// Boosting rounds for presets whose search space does not tune them.
    pub base_iterations: usize,
    /// Upper bound applied to any tuned iteration count (budget control).
    pub iteration_cap: Option<usize>,
    pub early_stopping_rounds: usize,
    pub histogram_bins: usize,
    pub threshold: f64,
    /// 0 disables bootstrap intervals.
    pub bootstrap_resamples: usize,
    pub permutation_repeats: usize,
    pub pdp_features: usize,
    pub pdp_points: usize,
    /// Rows per fold used for attributions (evenly spaced over the test set).
    pub explain_max_rows: usize,
    pub psi_bins: usize,
    pub calibration_bins: usize,
    pub preprocess: PreprocessPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: PathBuf::from("data/corporate_credit_ratings.csv"),
            schema_path: None,
            delimiter: ',',
            agencies: Agency::ALL.iter().map(|a| a.slug().to_string()).collect(),
            targets: vec![TargetMode::Binary],
            rank_rescale: false,
            folds: 5,
            presets: GrowthMode::ALL.to_vec(),
            trials: 50,
            seed: 42,
            out_dir: PathBuf::from("out"),
            firm_disjoint: false,
            base_iterations: 1000,
            iteration_cap: None,
            early_stopping_rounds: 50,
            histogram_bins: 64,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            bootstrap_resamples: 1000,
            permutation_repeats: 5,
            pdp_features: 4,
            pdp_points: 20,
            explain_max_rows: 300,
            psi_bins: 10,
            calibration_bins: 10,
            preprocess: PreprocessPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if self.agencies.is_empty() {
            return bad("at least one agency is required".into());
        }
        if self.presets.is_empty() {
            return bad("at least one preset is required".into());
        }
        if self.targets.is_empty() {
            return bad("at least one target mode is required".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.base_iterations == 0 || self.iteration_cap == Some(0) {
            return bad("iteration counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]".into());
        }
        if !self.delimiter.is_ascii() {
            return bad("delimiter must be a single ASCII character".into());
        }
        if self.psi_bins < 2 || self.calibration_bins < 1 || self.explain_max_rows == 0 {
            return bad("psi_bins >= 2, calibration_bins >= 1 and explain_max_rows >= 1 are required".into());
        }
        self.agency_list()?;
        self.preprocess.validate()?;
        Ok(())
    }

    /// Requested agencies, deduplicated, in table order.
    pub fn agency_list(&self) -> Result<Vec<Agency>> {
        let mut out = Vec::new();
        for a in &self.agencies {
            let parsed = Agency::ALL
                .into_iter()
                .find(|x| x.slug() == a)
                .or_else(|| Agency::parse(a))
                .ok_or_else(|| Error::Config(format!("unknown agency `{a}`")))?;
            if !out.contains(&parsed) {
                out.push(parsed);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn schema(&self) -> Result<SchemaMap> {
        match &self.schema_path {
            Some(p) => SchemaMap::from_json_file(p),
            None => Ok(crate::synthetic::default_schema()),
        }
    }

    pub fn delimiter_byte(&self) -> u8 {
        self.delimiter as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(c.agency_list().unwrap(), Agency::ALL.to_vec());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            r#"{"folds": 0}"#,
            r#"{"agencies": []}"#,
            r#"{"agencies": ["DBRS"]}"#,
            r#"{"presets": []}"#,
            r#"{"no_such_field": 1}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
        let c = RunConfig::from_json(r#"{"agencies": ["Fitch Ratings", "moodys", "fitch"]}"#).unwrap();
        assert_eq!(c.agency_list().unwrap(), vec![Agency::Moodys, Agency::Fitch]);
    }
}
