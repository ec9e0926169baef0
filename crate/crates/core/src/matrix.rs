use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Agency;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub firm_id: String,
    pub agency: Agency,
    pub period: NaiveDate,
}

impl RowKey {
    pub fn id(&self) -> String {
        format!("{}|{}|{}", self.firm_id, self.agency.slug(), self.period)
    }
}

/// Dense row-major design matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    n_rows: usize,
    values: Vec<f64>,
    pub row_keys: Vec<RowKey>,
}

impl FeatureMatrix {
    pub fn from_flat(column_names: Vec<String>, values: Vec<f64>, row_keys: Vec<RowKey>) -> Result<Self> {
        let m = column_names.len();
        let n_rows = row_keys.len();
        if values.len() != n_rows * m {
            return Err(Error::Shape(format!(
                "{} values for {n_rows} rows x {m} columns",
                values.len()
            )));
        }
        Ok(Self {
            column_names,
            n_rows,
            values,
            row_keys,
        })
    }

    /// Builds a matrix from rows, with synthetic row keys.
    pub fn from_rows(column_names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let m = column_names.len();
        let mut values = Vec::with_capacity(rows.len() * m);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::Shape(format!("row {i} has {} values, expected {m}", r.len())));
            }
            values.extend_from_slice(r);
        }
        let row_keys = (0..rows.len())
            .map(|i| RowKey {
                firm_id: format!("row{i}"),
                agency: Agency::Moodys,
                period: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            })
            .collect();
        Self::from_flat(column_names, values, row_keys)
    }

    /// Convenience for tests and examples: columns named `f0, f1, ...`.
    pub fn from_unnamed_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        Self::from_rows((0..m).map(|j| format!("f{j}")).collect(), rows)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.n_cols();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let m = self.n_cols();
        self.values[i * m + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.n_cols());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            column_names: self.column_names.clone(),
            n_rows: indices.len(),
            values,
            row_keys: indices.iter().map(|&i| self.row_keys[i].clone()).collect(),
        }
    }

    /// Writes the matrix as delimited text with a header row.
    pub fn write_delimited<W: std::io::Write>(&self, w: W, delimiter: u8) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().delimiter(delimiter).from_writer(w);
        let mut header = vec!["row_id".to_string()];
        header.extend(self.column_names.iter().cloned());
        wr.write_record(&header)?;
        for (i, key) in self.row_keys.iter().enumerate() {
            let mut rec = vec![key.id()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}
