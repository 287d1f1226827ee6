//! File formats: CSV for datasets, JSON for coefficients and reports.
//!
//! Floats are written in shortest round-trip form, so a value read back is
//! bit-identical to the value written.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisFamily, TimeGrid};
use crate::design::Dataset;
use crate::error::{Error, Result};
use crate::model::CoefficientFunctions;
use crate::solver::CoefMatrix;

pub const COVARIATES_FILE: &str = "covariates.csv";
pub const RESPONSES_FILE: &str = "responses.csv";

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        ryu::Buffer::new().format_finite(v).to_string()
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path, format!("cannot serialize: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes `covariates.csv` (header `x1..xs`) and `responses.csv` (header
/// `subject_id,t,y1..yp`, one row per subject and time point, subject ids
/// starting at 1) into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cov_path = dir.join(COVARIATES_FILE);
    let mut cov = String::new();
    let header: Vec<String> = (1..=data.s()).map(|j| format!("x{j}")).collect();
    cov.push_str(&header.join(","));
    cov.push('\n');
    for i in 0..data.n() {
        let row: Vec<String> = data.covariate_row(i).into_iter().map(fmt_f64).collect();
        cov.push_str(&row.join(","));
        cov.push('\n');
    }
    write_text(&cov_path, &cov)?;

    let mut resp = String::from("subject_id,t");
    for l in 1..=data.p() {
        resp.push_str(&format!(",y{l}"));
    }
    resp.push('\n');
    let times: Vec<String> = data.grid().points().iter().map(|&t| fmt_f64(t)).collect();
    for (i, y) in data.responses().iter().enumerate() {
        for (k, t) in times.iter().enumerate() {
            resp.push_str(&format!("{},{t}", i + 1));
            for v in y.column(k).iter() {
                resp.push(',');
                resp.push_str(&fmt_f64(*v));
            }
            resp.push('\n');
        }
    }
    write_text(&dir.join(RESPONSES_FILE), &resp)
}

fn parse_field(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, format!("line {line}: `{field}` is not a number")))
}

fn csv_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    })?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let records = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok((header, records))
}

/// Reads a dataset written by [`write_dataset`]. Responses must be grouped by
/// subject with ids `1..=n` in order and share one time grid.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let cov_path = dir.join(COVARIATES_FILE);
    let (cov_header, cov_rows) = csv_records(&cov_path)?;
    let s = cov_header.len();
    if s == 0 {
        return Err(Error::parse(&cov_path, "no covariate columns"));
    }
    let n = cov_rows.len();
    let mut cov_values = Vec::with_capacity(n * s);
    for (r, rec) in cov_rows.iter().enumerate() {
        if rec.len() != s {
            return Err(Error::parse(&cov_path, format!("line {}: expected {s} fields", r + 2)));
        }
        for f in rec.iter() {
            cov_values.push(parse_field(&cov_path, r + 2, f)?);
        }
    }
    let covariates = DMatrix::from_row_slice(n, s, &cov_values);

    let resp_path = dir.join(RESPONSES_FILE);
    let (resp_header, resp_rows) = csv_records(&resp_path)?;
    if resp_header.len() < 3 || resp_header[0] != "subject_id" || resp_header[1] != "t" {
        return Err(Error::parse(&resp_path, "header must be subject_id,t,y1,...,yp"));
    }
    let p = resp_header.len() - 2;
    let mut per_subject: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (r, rec) in resp_rows.iter().enumerate() {
        let line = r + 2;
        if rec.len() != p + 2 {
            return Err(Error::parse(&resp_path, format!("line {line}: expected {} fields", p + 2)));
        }
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(&resp_path, format!("line {line}: bad subject_id")))?;
        if id == per_subject.len() + 1 {
            per_subject.push((Vec::new(), Vec::new()));
        } else if id != per_subject.len() || id == 0 {
            return Err(Error::parse(
                &resp_path,
                format!("line {line}: subject ids must be contiguous and start at 1"),
            ));
        }
        let entry = per_subject.last_mut().expect("pushed above");
        entry.0.push(parse_field(&resp_path, line, &rec[1])?);
        for f in rec.iter().skip(2) {
            entry.1.push(parse_field(&resp_path, line, f)?);
        }
    }
    if per_subject.len() != n {
        return Err(Error::parse(
            &resp_path,
            format!("{} subjects in responses but {n} covariate rows", per_subject.len()),
        ));
    }
    let times = per_subject
        .first()
        .map(|s| s.0.clone())
        .ok_or_else(|| Error::parse(&resp_path, "no response rows"))?;
    let grid = TimeGrid::new(times.clone()).map_err(|e| Error::parse(&resp_path, e.to_string()))?;
    let mut responses = Vec::with_capacity(n);
    for (i, (t, vals)) in per_subject.into_iter().enumerate() {
        if t != times {
            return Err(Error::parse(
                &resp_path,
                format!("subject {} uses a different time grid", i + 1),
            ));
        }
        // Rows are time points, so the row-major slice is the transpose of p × T.
        responses.push(DMatrix::from_row_slice(t.len(), p, &vals).transpose());
    }
    Dataset::new(covariates, responses, grid)
}

/// Serialized form of a coefficient matrix with its basis family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientsFile {
    pub family: BasisFamily,
    pub s: usize,
    pub c: usize,
    /// Row-major `p × sc`.
    pub m: Vec<Vec<f64>>,
}

impl CoefficientsFile {
    pub fn from_functions(cf: &CoefficientFunctions) -> Self {
        let m = cf.m_hat.matrix();
        Self {
            family: cf.family,
            s: cf.s(),
            c: cf.c(),
            m: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn to_functions(&self) -> Result<CoefficientFunctions> {
        let p = self.m.len();
        let sc = self.s * self.c;
        if p == 0 || self.m.iter().any(|r| r.len() != sc) {
            return Err(Error::DimensionMismatch(format!(
                "coefficient rows must all have s * c = {sc} entries"
            )));
        }
        let m = DMatrix::from_fn(p, sc, |r, c| self.m[r][c]);
        Ok(CoefficientFunctions::new(CoefMatrix::new(m, self.s, self.c)?, self.family))
    }
}

/// Loads coefficients from either a bare [`CoefficientsFile`] or any JSON
/// object carrying one under a `coefficients` key (fit output, ground truth).
pub fn load_coefficients(path: &Path) -> Result<CoefficientFunctions> {
    let value: serde_json::Value = read_json(path)?;
    let inner = value.get("coefficients").cloned().unwrap_or(value);
    let file: CoefficientsFile =
        serde_json::from_value(inner).map_err(|e| Error::parse(path, e.to_string()))?;
    file.to_functions().map_err(|e| Error::parse(path, e.to_string()))
}
