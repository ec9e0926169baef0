//! Seeded generator for ratings tables shaped like the public corporate
//! credit-rating export, for demos, integration tests and benchmarking when
//! the real file is not at hand.
//!
//! Every firm carries a latent credit quality that drifts year to year. The
//! four "driver" ratios (operating margin, return on equity, current ratio,
//! long-term debt to capital) load on it strongly, a few others weakly, and
//! the rest are noise. Grades are cut from the latent score plus
//! agency-specific noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_table, Agency, RawTable, SchemaMap};
use crate::stats::sigmoid;
use crate::targets::STANDARD_GRADES;

pub const FIRM_COL: &str = "Corporation";
pub const AGENCY_COL: &str = "Rating Agency";
pub const RATING_COL: &str = "Rating";
pub const DATE_COL: &str = "Rating Date";
pub const SECTOR_COL: &str = "Sector";

/// Numeric columns in the order they are written.
pub const NUMERIC_COLS: [&str; 16] = [
    "Current Ratio",
    "Long-term Debt / Capital",
    "Debt/Equity Ratio",
    "Gross Margin",
    "Operating Margin",
    "EBIT Margin",
    "EBITDA Margin",
    "Pre-Tax Profit Margin",
    "Net Profit Margin",
    "Asset Turnover",
    "ROE - Return On Equity",
    "Return On Tangible Equity",
    "ROA - Return On Assets",
    "ROI - Return On Investment",
    "Operating Cash Flow Per Share",
    "Free Cash Flow Per Share",
];

/// The columns that carry most of the signal in generated data.
pub const DRIVER_COLS: [&str; 4] = [
    "Operating Margin",
    "ROE - Return On Equity",
    "Current Ratio",
    "Long-term Debt / Capital",
];

const SECTORS: [&str; 8] = [
    "BusEq", "Chems", "Durbl", "Enrgy", "Hlth", "Manuf", "Shops", "Utils",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_firms: usize,
    pub first_year: i32,
    pub n_years: usize,
    pub agencies: Vec<Agency>,
    /// Chance that a given agency rates a given firm in a given year.
    pub rating_probability: f64,
    /// Chance that any single feature cell is blank.
    pub missing_rate: f64,
    /// Extra rows from an agency outside the four, to exercise rejection.
    pub foreign_agency_rows: usize,
    /// Standard deviation of the grade noise; larger is harder.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_firms: 300,
            first_year: 2010,
            n_years: 7,
            agencies: Agency::ALL.to_vec(),
            rating_probability: 0.5,
            missing_rate: 0.06,
            foreign_agency_rows: 0,
            label_noise: 0.35,
            seed: 7,
        }
    }
}

/// The schema binding generated tables (and the public export's headers).
pub fn default_schema() -> SchemaMap {
    SchemaMap {
        firm_id_col: FIRM_COL.into(),
        agency_col: AGENCY_COL.into(),
        rating_col: RATING_COL.into(),
        date_col: DATE_COL.into(),
        numeric_feature_cols: NUMERIC_COLS.iter().map(|s| s.to_string()).collect(),
        categorical_feature_cols: vec![SECTOR_COL.into()],
        date_format: "%Y-%m-%d".into(),
        rating_scale: None,
    }
}

fn grade_for(score: f64) -> &'static str {
    // score ~ N(0.35, ~1.1): the cut points put roughly 60% at BBB- or better
    let cuts = [
        2.6, 2.3, 2.0, 1.75, 1.5, 1.25, 1.0, 0.75, 0.5, 0.2, -0.05, -0.3, -0.55, -0.8, -1.05, -1.3, -1.55,
        -1.8, -2.05, -2.3, -2.6,
    ];
    let i = cuts.iter().position(|&c| score >= c).unwrap_or(cuts.len());
    STANDARD_GRADES[i.min(STANDARD_GRADES.len() - 1)]
}

fn fmt_cell(v: f64) -> String {
    format!("{v:.4}")
}

/// Generates the table as CSV text.
pub fn generate_csv(spec: &SyntheticSpec) -> Result<String> {
    if spec.n_firms == 0 || spec.n_years == 0 || spec.agencies.is_empty() {
        return Err(Error::Config("synthetic data needs firms, years and agencies".into()));
    }
    if !(0.0..=1.0).contains(&spec.rating_probability) || !(0.0..1.0).contains(&spec.missing_rate) {
        return Err(Error::Config("probabilities must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut header = vec![FIRM_COL, AGENCY_COL, RATING_COL, DATE_COL, SECTOR_COL];
    header.extend(NUMERIC_COLS);
    wr.write_record(&header)?;

    let agency_bias: Vec<f64> = spec.agencies.iter().map(|_| 0.15 * std.sample(&mut rng)).collect();
    for f in 0..spec.n_firms {
        let name = format!("Firm {f:04}");
        let sector = rng.gen_range(0..SECTORS.len());
        let sector_effect = (sector as f64 - 3.5) * 0.06;
        let mut z: f64 = 0.35 + std.sample(&mut rng);
        let size = std.sample(&mut rng);
        for y in 0..spec.n_years {
            if y > 0 {
                z = 0.35 + 0.85 * (z - 0.35) + 0.5 * std.sample(&mut rng);
            }
            let mut n = || std.sample(&mut rng);
            let op_margin = 0.10 + 0.07 * z + 0.025 * n();
            let roe = 0.12 + 0.08 * z + 0.05 * n() + 0.01 * n().powi(3);
            let current = (0.25 + 0.28 * z + 0.15 * n()).exp();
            let ltdc = sigmoid(-0.3 - 0.9 * z + 0.35 * n());
            let values = [
                current,
                ltdc,
                (0.2 - 0.4 * z + 0.5 * n()).exp(),
                0.35 + 0.03 * z + 0.12 * n() + sector_effect,
                op_margin,
                op_margin + 0.01 * n(),
                op_margin + 0.06 + 0.03 * n(),
                op_margin - 0.02 + 0.03 * n(),
                0.06 + 0.03 * z + 0.04 * n(),
                (0.0 + 0.05 * z + 0.4 * n() - 0.2 * sector_effect).exp(),
                roe,
                roe + 0.08 * n(),
                0.05 + 0.025 * z + 0.025 * n(),
                0.08 + 0.04 * z + 0.05 * n(),
                (1.0 + 0.5 * size + 0.6 * n()).exp() * (0.6 + 0.2 * z).max(0.05),
                1.5 * n() + 0.3 * size,
            ];
            for (a, &agency) in spec.agencies.iter().enumerate() {
                if rng.gen::<f64>() >= spec.rating_probability {
                    continue;
                }
                let score = z + sector_effect + agency_bias[a] + spec.label_noise * std.sample(&mut rng);
                let day = rng.gen_range(0..365);
                let date = chrono::NaiveDate::from_ymd_opt(spec.first_year + y as i32, 1, 1)
                    .and_then(|d| d.checked_add_days(chrono::Days::new(day)))
                    .ok_or_else(|| Error::Config("synthetic year out of range".into()))?;
                let mut rec = vec![
                    name.clone(),
                    agency.display_name().to_string(),
                    grade_for(score).to_string(),
                    date.format("%Y-%m-%d").to_string(),
                    SECTORS[sector].to_string(),
                ];
                for &v in &values {
                    if rng.gen::<f64>() < spec.missing_rate {
                        rec.push(String::new());
                    } else {
                        rec.push(fmt_cell(v));
                    }
                }
                wr.write_record(&rec)?;
            }
        }
    }
    for i in 0..spec.foreign_agency_rows {
        let mut rec = vec![
            format!("Firm {:04}", i % spec.n_firms),
            "DBRS".to_string(),
            "A".to_string(),
            format!("{}-06-30", spec.first_year),
            SECTORS[0].to_string(),
        ];
        rec.extend(NUMERIC_COLS.iter().map(|_| "1.0".to_string()));
        wr.write_record(&rec)?;
    }
    let bytes = wr.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Generates and parses the table in one step.
pub fn generate_table(spec: &SyntheticSpec) -> Result<RawTable> {
    parse_table(generate_csv(spec)?.as_bytes(), b',', "<synthetic>")
}

/// Writes the table to `path`.
pub fn write_csv(spec: &SyntheticSpec, path: &std::path::Path) -> Result<()> {
    crate::io::write_string(path, &generate_csv(spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::bind_schema;
    use crate::targets::to_binary;

    #[test]
    fn generated_table_binds_and_is_balanced() {
        let spec = SyntheticSpec {
            n_firms: 120,
            foreign_agency_rows: 3,
            ..SyntheticSpec::default()
        };
        let table = generate_table(&spec).unwrap();
        let obs = bind_schema(&table, &default_schema()).unwrap();
        assert_eq!(obs.rejected.len(), 3);
        assert_eq!(obs.len() + 3, table.rows.len());
        let pos = obs.records.iter().filter(|r| to_binary(&r.rating).unwrap() == 1).count();
        let frac = pos as f64 / obs.len() as f64;
        assert!((0.4..0.8).contains(&frac), "{frac}");
        let years: std::collections::BTreeSet<_> = obs.records.iter().map(|r| chrono::Datelike::year(&r.period)).collect();
        assert_eq!(years.len(), 7);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec {
            n_firms: 20,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_csv(&spec).unwrap(), generate_csv(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_csv(&spec).unwrap(), generate_csv(&other).unwrap());
    }
}
