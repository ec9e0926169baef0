//! Loading the ratings table, binding a column schema, and the exploratory
//! summary that precedes every experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::targets::{normalize_grade, RatingScale};

/// Cells treated as absent (compared case-insensitively after trimming).
pub const MISSING_SENTINELS: [&str; 4] = ["", "na", "nan", "null"];

/// A delimiter-separated table exactly as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub source_path: String,
    /// SHA-256 of the raw file bytes.
    pub content_hash: String,
}

impl RawTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Reads a delimited file. The first record is the header; data rows are
/// numbered from 1 in error messages.
pub fn load_table(path: impl AsRef<Path>, delimiter: u8) -> Result<RawTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_table(&bytes, delimiter, &path.display().to_string())
}

pub fn parse_table(bytes: &[u8], delimiter: u8, source: &str) -> Result<RawTable> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::EmptyFile(PathBuf::from(source)));
    }
    let content_hash = stats::sha256_hex(bytes);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec?.iter().map(|h| h.trim().trim_start_matches('\u{feff}').to_string()).collect(),
        None => return Err(Error::EmptyFile(PathBuf::from(source))),
    };
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: header.len(),
                found: rec.len(),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(RawTable {
        header,
        rows,
        source_path: source.to_string(),
        content_hash,
    })
}

/// Column roles for a ratings table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub firm_id_col: String,
    pub agency_col: String,
    pub rating_col: String,
    pub date_col: String,
    pub numeric_feature_cols: Vec<String>,
    #[serde(default)]
    pub categorical_feature_cols: Vec<String>,
    /// chrono `strftime` pattern, e.g. `%Y-%m-%d`.
    #[serde(default = "default_date_format")]
    pub date_format: String,
    /// Non-standard alphabet; the standard 22-grade scale otherwise.
    #[serde(default)]
    pub rating_scale: Option<RatingScale>,
}

fn default_date_format() -> String {
    "%Y-%m-%d".to_string()
}

impl SchemaMap {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn scale(&self) -> RatingScale {
        self.rating_scale.clone().unwrap_or_default()
    }

    fn all_columns(&self) -> Vec<&str> {
        let mut cols = vec![
            self.firm_id_col.as_str(),
            self.agency_col.as_str(),
            self.rating_col.as_str(),
            self.date_col.as_str(),
        ];
        cols.extend(self.numeric_feature_cols.iter().map(String::as_str));
        cols.extend(self.categorical_feature_cols.iter().map(String::as_str));
        cols
    }

    /// Every named column exists in `header` and no column has two roles.
    pub fn validate(&self, header: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for col in self.all_columns() {
            if !seen.insert(col) {
                return Err(Error::DuplicateRole(col.to_string()));
            }
            if !header.iter().any(|h| h == col) {
                return Err(Error::MissingColumn(col.to_string()));
            }
        }
        Ok(())
    }
}

/// The four rating agencies, in the order the result tables list them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Agency {
    #[serde(rename = "Moody's Investors Service")]
    Moodys,
    #[serde(rename = "Fitch Ratings")]
    Fitch,
    #[serde(rename = "Standard & Poor's Ratings Services")]
    StandardAndPoors,
    #[serde(rename = "Egan-Jones Ratings Company")]
    EganJones,
}

impl Agency {
    pub const ALL: [Agency; 4] = [
        Agency::Moodys,
        Agency::Fitch,
        Agency::StandardAndPoors,
        Agency::EganJones,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Agency::Moodys => "Moody's Investors Service",
            Agency::Fitch => "Fitch Ratings",
            Agency::StandardAndPoors => "Standard & Poor's Ratings Services",
            Agency::EganJones => "Egan-Jones Ratings Company",
        }
    }

    /// Short identifier used in file names and seed derivation.
    pub fn slug(self) -> &'static str {
        match self {
            Agency::Moodys => "moodys",
            Agency::Fitch => "fitch",
            Agency::StandardAndPoors => "sp",
            Agency::EganJones => "egan_jones",
        }
    }

    /// Lenient parse of the spellings found in public exports.
    pub fn parse(raw: &str) -> Option<Agency> {
        let s: String = raw
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '&')
            .collect();
        if s.starts_with("moody") {
            Some(Agency::Moodys)
        } else if s.starts_with("fitch") {
            Some(Agency::Fitch)
        } else if s.starts_with("standard") || s.starts_with("s&p") || s == "sp" {
            Some(Agency::StandardAndPoors)
        } else if s.starts_with("egan") {
            Some(Agency::EganJones)
        } else {
            None
        }
    }
}

impl fmt::Display for Agency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// One firm-period rating record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 1-based data-row number in the source table.
    pub source_row: usize,
    pub firm_id: String,
    pub agency: Agency,
    /// Normalized (trimmed, upper-cased) grade text.
    pub rating: String,
    /// False when the grade is outside the configured alphabet.
    pub rating_known: bool,
    pub period: NaiveDate,
    /// Aligned with `ObservationSet::numeric_features`.
    pub numeric: Vec<Option<f64>>,
    /// Aligned with `ObservationSet::categorical_features`.
    pub categorical: Vec<Option<String>>,
}

impl Observation {
    pub fn missing_count(&self) -> usize {
        self.numeric.iter().filter(|v| v.is_none()).count()
            + self.categorical.iter().filter(|v| v.is_none()).count()
    }
}

/// A raw row that was not turned into an observation, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub source_row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub numeric_features: Vec<String>,
    pub categorical_features: Vec<String>,
    pub records: Vec<Observation>,
    /// Rows outside the four agencies; `records.len() + rejected.len()`
    /// equals the raw row count.
    pub rejected: Vec<RejectedRow>,
    pub content_hash: String,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn numeric_index(&self, name: &str) -> Option<usize> {
        self.numeric_features.iter().position(|f| f == name)
    }

    pub fn categorical_index(&self, name: &str) -> Option<usize> {
        self.categorical_features.iter().position(|f| f == name)
    }

    /// A new set with the given records, same columns.
    pub fn with_records(&self, records: Vec<Observation>) -> ObservationSet {
        ObservationSet {
            numeric_features: self.numeric_features.clone(),
            categorical_features: self.categorical_features.clone(),
            records,
            rejected: Vec::new(),
            content_hash: self.content_hash.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> ObservationSet {
        self.with_records(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    pub fn filter_agency(&self, agency: Agency) -> ObservationSet {
        self.with_records(
            self.records
                .iter()
                .filter(|r| r.agency == agency)
                .cloned()
                .collect(),
        )
    }

    pub fn numeric_column(&self, j: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.records.iter().map(move |r| r.numeric[j])
    }

    /// SHA-256 over a canonical JSON rendering of the records.
    pub fn records_hash(&self) -> String {
        let bytes = serde_json::to_vec(&(&self.numeric_features, &self.categorical_features, &self.records))
            .expect("observations serialize");
        stats::sha256_hex(&bytes)
    }
}

pub fn is_missing_cell(cell: &str) -> bool {
    let t = cell.trim();
    MISSING_SENTINELS.iter().any(|s| t.eq_ignore_ascii_case(s))
}

fn parse_numeric(cell: &str, row: usize, col: &str) -> Result<Option<f64>> {
    if is_missing_cell(cell) {
        return Ok(None);
    }
    let v: f64 = cell.trim().parse().map_err(|_| {
        Error::InvalidInput(format!("row {row}: column `{col}` value `{cell}` is not numeric"))
    })?;
    if v.is_finite() {
        Ok(Some(v))
    } else {
        log::warn!("row {row}: non-finite value `{cell}` in `{col}` treated as missing");
        Ok(None)
    }
}

/// Turns raw rows into typed observations.
///
/// Rows whose agency is not one of the four are kept in `rejected` with the
/// reason, so no row is dropped silently.
pub fn bind_schema(table: &RawTable, schema: &SchemaMap) -> Result<ObservationSet> {
    schema.validate(&table.header)?;
    let scale = schema.scale();
    let idx = |c: &str| table.column_index(c).expect("validated");
    let firm = idx(&schema.firm_id_col);
    let agency_col = idx(&schema.agency_col);
    let rating_col = idx(&schema.rating_col);
    let date_col = idx(&schema.date_col);
    let num_cols: Vec<usize> = schema.numeric_feature_cols.iter().map(|c| idx(c)).collect();
    let cat_cols: Vec<usize> = schema
        .categorical_feature_cols
        .iter()
        .map(|c| idx(c))
        .collect();

    let mut records = Vec::with_capacity(table.rows.len());
    let mut rejected = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        let source_row = i + 1;
        let date_raw = row[date_col].trim();
        let period = NaiveDate::parse_from_str(date_raw, &schema.date_format).map_err(|_| {
            Error::BadDate {
                row: source_row,
                value: date_raw.to_string(),
            }
        })?;
        let Some(agency) = Agency::parse(&row[agency_col]) else {
            rejected.push(RejectedRow {
                source_row,
                reason: format!("unrecognized agency `{}`", row[agency_col].trim()),
            });
            continue;
        };
        let rating = normalize_grade(&row[rating_col]);
        let rating_known = scale.contains(&rating);
        if !rating_known {
            log::warn!("row {source_row}: grade `{rating}` is outside the rating scale");
        }
        let numeric = num_cols
            .iter()
            .zip(&schema.numeric_feature_cols)
            .map(|(&c, name)| parse_numeric(&row[c], source_row, name))
            .collect::<Result<Vec<_>>>()?;
        let categorical = cat_cols
            .iter()
            .map(|&c| {
                let cell = &row[c];
                (!is_missing_cell(cell)).then(|| cell.trim().to_string())
            })
            .collect();
        records.push(Observation {
            source_row,
            firm_id: row[firm].trim().to_string(),
            agency,
            rating,
            rating_known,
            period,
            numeric,
            categorical,
        });
    }
    Ok(ObservationSet {
        numeric_features: schema.numeric_feature_cols.clone(),
        categorical_features: schema.categorical_feature_cols.clone(),
        records,
        rejected,
        content_hash: table.content_hash.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature: String,
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Sample standard deviation.
    pub std: Option<f64>,
    pub skewness: Option<f64>,
    pub q01: Option<f64>,
    pub q99: Option<f64>,
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub n_obs: usize,
    pub n_firms: usize,
    pub n_agencies: usize,
    pub time_span: (NaiveDate, NaiveDate),
    pub n_numeric_features: usize,
    pub n_categorical_features: usize,
    pub features: Vec<FeatureSummary>,
    /// Missing cells over all numeric and categorical feature cells.
    pub overall_missing_fraction: f64,
}

pub fn summarize_feature(name: &str, values: &[Option<f64>]) -> FeatureSummary {
    let observed: Vec<f64> = values.iter().flatten().copied().collect();
    let sorted = stats::sorted_copy(&observed);
    let missing_fraction = if values.is_empty() {
        0.0
    } else {
        (values.len() - observed.len()) as f64 / values.len() as f64
    };
    FeatureSummary {
        feature: name.to_string(),
        count: observed.len(),
        mean: stats::mean(&observed),
        median: stats::quantile_sorted(&sorted, 0.5),
        std: stats::std_sample(&observed),
        skewness: stats::skewness(&observed),
        q01: stats::quantile_sorted(&sorted, 0.01),
        q99: stats::quantile_sorted(&sorted, 0.99),
        missing_fraction,
    }
}

pub fn summarize(obs: &ObservationSet) -> Result<SummaryReport> {
    if obs.is_empty() {
        return Err(Error::InvalidInput("cannot summarize an empty observation set".into()));
    }
    let firms: BTreeSet<&str> = obs.records.iter().map(|r| r.firm_id.as_str()).collect();
    let agencies: BTreeSet<Agency> = obs.records.iter().map(|r| r.agency).collect();
    let min_date = obs.records.iter().map(|r| r.period).min().expect("non-empty");
    let max_date = obs.records.iter().map(|r| r.period).max().expect("non-empty");
    let features = obs
        .numeric_features
        .iter()
        .enumerate()
        .map(|(j, name)| summarize_feature(name, &obs.numeric_column(j).collect::<Vec<_>>()))
        .collect();
    let cells = obs.len() * (obs.numeric_features.len() + obs.categorical_features.len());
    let missing: usize = obs.records.iter().map(Observation::missing_count).sum();
    Ok(SummaryReport {
        n_obs: obs.len(),
        n_firms: firms.len(),
        n_agencies: agencies.len(),
        time_span: (min_date, max_date),
        n_numeric_features: obs.numeric_features.len(),
        n_categorical_features: obs.categorical_features.len(),
        features,
        overall_missing_fraction: if cells == 0 { 0.0 } else { missing as f64 / cells as f64 },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl SummaryReport {
    /// Aligned text: the dataset block first, then one row per feature.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("Total observations", self.n_obs.to_string()),
            ("Unique firms", self.n_firms.to_string()),
            ("Rating agencies", self.n_agencies.to_string()),
            (
                "Time span",
                format!("{} to {}", self.time_span.0, self.time_span.1),
            ),
            ("Numerical features", self.n_numeric_features.to_string()),
            ("Categorical features", self.n_categorical_features.to_string()),
            (
                "Percentage missing overall",
                format!("{:.1} percent", self.overall_missing_fraction * 100.0),
            ),
        ];
        let _ = writeln!(out, "{:<28} {:>24}", "Statistic", "Value");
        let _ = writeln!(out, "{}", "-".repeat(53));
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<28} {v:>24}");
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<32} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>8}",
            "feature", "mean", "median", "std", "skewness", "q01", "q99", "missing"
        );
        for f in &self.features {
            let _ = writeln!(
                out,
                "{:<32} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>8.4}",
                f.feature,
                fmt_opt(f.mean),
                fmt_opt(f.median),
                fmt_opt(f.std),
                fmt_opt(f.skewness),
                fmt_opt(f.q01),
                fmt_opt(f.q99),
                f.missing_fraction
            );
        }
        out
    }
}

/// Per-agency record counts, used by reports and the CLI.
pub fn agency_counts(obs: &ObservationSet) -> BTreeMap<Agency, usize> {
    let mut counts = BTreeMap::new();
    for r in &obs.records {
        *counts.entry(r.agency).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "firm,agency,rating,date,x,sector\n\
        f1,Moody's Investors Service, bbb- ,2014-03-31,1.5,tech\n\
        f2,Fitch Ratings,AA,2015-06-30,,NA\n";

    fn schema() -> SchemaMap {
        SchemaMap {
            firm_id_col: "firm".into(),
            agency_col: "agency".into(),
            rating_col: "rating".into(),
            date_col: "date".into(),
            numeric_feature_cols: vec!["x".into()],
            categorical_feature_cols: vec!["sector".into()],
            date_format: "%Y-%m-%d".into(),
            rating_scale: None,
        }
    }

    #[test]
    fn parses_header_and_rows() {
        let t = parse_table(CSV.as_bytes(), b',', "mem").unwrap();
        assert_eq!(t.header.len(), 6);
        assert_eq!(t.rows.len(), 2);
    }

    #[test]
    fn ragged_row_is_named() {
        let mut text = String::from("a,b,c\n");
        for _ in 0..4 {
            text.push_str("1,2,3\n");
        }
        text.push_str("1,2\n");
        match parse_table(text.as_bytes(), b',', "mem") {
            Err(Error::RaggedRow { row, expected, found }) => {
                assert_eq!((row, expected, found), (5, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(parse_table(b"", b',', "mem"), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn identical_bytes_hash_identically() {
        let a = parse_table(CSV.as_bytes(), b',', "a").unwrap();
        let b = parse_table(CSV.as_bytes(), b',', "b").unwrap();
        assert_eq!(a.content_hash, b.content_hash);
    }

    #[test]
    fn bind_normalizes_cells() {
        let t = parse_table(CSV.as_bytes(), b',', "mem").unwrap();
        let obs = bind_schema(&t, &schema()).unwrap();
        assert_eq!(obs.len(), 2);
        let r0 = &obs.records[0];
        assert_eq!(r0.rating, "BBB-");
        assert!(r0.rating_known);
        assert_eq!(r0.period, NaiveDate::from_ymd_opt(2014, 3, 31).unwrap());
        assert_eq!(r0.agency, Agency::Moodys);
        let r1 = &obs.records[1];
        assert_eq!(r1.numeric[0], None);
        assert_eq!(r1.categorical[0], None);
    }

    #[test]
    fn bind_reports_missing_column_and_bad_date() {
        let t = parse_table(CSV.as_bytes(), b',', "mem").unwrap();
        let mut s = schema();
        s.numeric_feature_cols.push("nope".into());
        assert!(matches!(bind_schema(&t, &s), Err(Error::MissingColumn(c)) if c == "nope"));

        let bad = "firm,agency,rating,date,x,sector\nf1,Fitch,A,31/03/2014,1,a\n";
        let t = parse_table(bad.as_bytes(), b',', "mem").unwrap();
        match bind_schema(&t, &schema()) {
            Err(Error::BadDate { row, value }) => {
                assert_eq!(row, 1);
                assert_eq!(value, "31/03/2014");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_roles_rejected() {
        let t = parse_table(CSV.as_bytes(), b',', "mem").unwrap();
        let mut s = schema();
        s.categorical_feature_cols.push("x".into());
        assert!(matches!(bind_schema(&t, &s), Err(Error::DuplicateRole(_))));
    }

    #[test]
    fn unknown_agencies_are_logged_not_dropped() {
        let text = "firm,agency,rating,date,x,sector\nf1,DBRS,A,2014-01-01,1,a\nf2,Fitch,A,2014-01-01,1,a\n";
        let t = parse_table(text.as_bytes(), b',', "mem").unwrap();
        let obs = bind_schema(&t, &schema()).unwrap();
        assert_eq!(obs.len() + obs.rejected.len(), t.rows.len());
        assert_eq!(obs.rejected[0].source_row, 1);
    }

    #[test]
    fn sentinels_are_missing() {
        for s in ["", " NA ", "nan", "NULL", "NaN"] {
            assert!(is_missing_cell(s), "{s}");
        }
        assert!(!is_missing_cell("0"));
    }

    #[test]
    fn feature_without_values_is_undefined() {
        let f = summarize_feature("x", &[None, None]);
        assert_eq!(f.mean, None);
        assert_eq!(f.q01, None);
        assert_eq!(f.missing_fraction, 1.0);
    }

    #[test]
    fn summary_counts() {
        let t = parse_table(CSV.as_bytes(), b',', "mem").unwrap();
        let obs = bind_schema(&t, &schema()).unwrap();
        let s = summarize(&obs).unwrap();
        assert_eq!((s.n_obs, s.n_firms, s.n_agencies), (2, 2, 2));
        // 4 feature cells, 2 missing
        assert_eq!(s.overall_missing_fraction, 0.5);
        assert!(s.to_text_table().contains("Unique firms"));
    }

    #[test]
    fn agency_aliases() {
        assert_eq!(Agency::parse("S&P"), Some(Agency::StandardAndPoors));
        assert_eq!(Agency::parse("Standard & Poor's Ratings Services"), Some(Agency::StandardAndPoors));
        assert_eq!(Agency::parse("Egan-Jones Ratings Company"), Some(Agency::EganJones));
        assert_eq!(Agency::parse("Moody's"), Some(Agency::Moodys));
        assert_eq!(Agency::parse("DBRS"), None);
    }
}
