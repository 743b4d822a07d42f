//! CSV ingestion of user samples.
//!
//! Convenience file: `y`, covariate columns, optional `pi_r`.
//! Reference file: covariate columns and `pi_r`.
//! Every column other than `y` and `pi_r` is a covariate; the reference file
//! must contain the convenience file's covariates (in any order).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::model::ObservedData;

pub const OUTCOME: &str = "y";
pub const PI_R: &str = "pi_r";

#[derive(Debug, Clone)]
struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn take(&self, col: usize) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r[col]))
    }

    fn take_many(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), cols.len(), |i, j| self.rows[i][cols[j]])
    }
}

fn read_table<R: Read>(reader: R, what: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(headers.len());
        for (field, name) in record.iter().zip(&headers) {
            let v: f64 = field.parse().map_err(|_| {
                invalid(format!("{what} row {}: column `{name}` holds `{field}`, not a number", line + 1))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(Table { headers, rows })
}

/// A convenience sample as read from CSV.
#[derive(Debug, Clone)]
pub struct ConvenienceTable {
    pub covariates: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub pi_r: Option<DVector<f64>>,
}

/// A reference sample as read from CSV.
#[derive(Debug, Clone)]
pub struct ReferenceTable {
    pub covariates: Vec<String>,
    pub x: DMatrix<f64>,
    pub pi_r: DVector<f64>,
}

pub fn read_convenience<R: Read>(reader: R) -> Result<ConvenienceTable> {
    let t = read_table(reader, "convenience file")?;
    let y = t.column(OUTCOME).ok_or_else(|| Error::MissingColumn(OUTCOME.into()))?;
    let pi = t.column(PI_R);
    let cov: Vec<usize> = (0..t.headers.len()).filter(|&c| c != y && Some(c) != pi).collect();
    Ok(ConvenienceTable {
        covariates: cov.iter().map(|&c| t.headers[c].clone()).collect(),
        x: t.take_many(&cov),
        y: t.take(y),
        pi_r: pi.map(|c| t.take(c)),
    })
}

pub fn read_reference<R: Read>(reader: R) -> Result<ReferenceTable> {
    let t = read_table(reader, "reference file")?;
    let pi = t.column(PI_R).ok_or_else(|| Error::MissingColumn(PI_R.into()))?;
    let cov: Vec<usize> = (0..t.headers.len())
        .filter(|&c| c != pi && t.headers[c] != OUTCOME)
        .collect();
    Ok(ReferenceTable {
        covariates: cov.iter().map(|&c| t.headers[c].clone()).collect(),
        x: t.take_many(&cov),
        pi_r: t.take(pi),
    })
}

/// Combines the two tables, reordering reference covariates to match.
pub fn combine(conv: ConvenienceTable, reference: ReferenceTable) -> Result<ObservedData> {
    let mut order = Vec::with_capacity(conv.covariates.len());
    for name in &conv.covariates {
        let j = reference
            .covariates
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::MissingColumn(format!("{name} (reference file)")))?;
        order.push(j);
    }
    if let Some(extra) = reference.covariates.iter().find(|r| !conv.covariates.contains(r)) {
        return Err(Error::MissingColumn(format!("{extra} (convenience file)")));
    }
    let ref_x = reference.x.select_columns(order.iter());
    ObservedData::new(conv.x, conv.y, conv.pi_r, ref_x, reference.pi_r)
}

/// Reads and combines a convenience and a reference CSV file.
pub fn load_observed(conv_path: &Path, ref_path: &Path) -> Result<ObservedData> {
    let conv = read_convenience(File::open(conv_path)?)?;
    let reference = read_reference(File::open(ref_path)?)?;
    combine(conv, reference)
}
