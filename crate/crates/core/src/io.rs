//! Area-level CSV datasets, tabular report writers and run manifests.
//!
//! # Dataset layout
//!
//! One row per area, columns identified by header name (order is free):
//!
//! | column | meaning |
//! |---|---|
//! | `area_id` | opaque identifier |
//! | `y` *or* `z` | direct estimate on the raw scale (must be > 0) or its log |
//! | `x_1..x_p` *or* `w_1..w_p` | covariates on the raw scale (> 0) or their logs |
//! | `psi` | sampling variance of `z` |
//! | `sme_diag_1..p` *or* `sme_j_k` for all `j >= k` | measurement-error covariance of `w` |
//!
//! Raw-scale columns are log-transformed on load. Every `Sigma_i` is checked
//! for symmetry and positive semi-definiteness.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::AreaObservation;

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scale {
    Raw,
    Log,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SigmaLayout {
    Diagonal(Vec<usize>),
    /// Column index for each `(j, k)` with `j >= k`, row-major over the lower triangle.
    LowerTriangle(Vec<((usize, usize), usize)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Schema {
    area_id: usize,
    response: (usize, Scale),
    covariates: (Vec<usize>, Scale),
    psi: usize,
    sigma: SigmaLayout,
}

fn parse_error(column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line: 1,
        column: column.to_string(),
        message: message.into(),
    }
}

fn numbered(index: &HashMap<&str, usize>, prefix: &str) -> Vec<(usize, usize)> {
    let mut found: Vec<(usize, usize)> = index
        .iter()
        .filter_map(|(name, &col)| {
            name.strip_prefix(prefix)
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|k| (k, col))
        })
        .collect();
    found.sort_unstable();
    found
}

fn contiguous(found: &[(usize, usize)], prefix: &str) -> Result<Vec<usize>> {
    for (expected, (k, _)) in (1..).zip(found) {
        if *k != expected {
            return Err(parse_error(
                &format!("{prefix}{expected}"),
                "covariate columns must be numbered 1..p without gaps",
            ));
        }
    }
    Ok(found.iter().map(|&(_, c)| c).collect())
}

impl Schema {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let mut index = HashMap::new();
        for (col, name) in headers.iter().enumerate() {
            if index.insert(name.trim(), col).is_some() {
                return Err(parse_error(name, "duplicate column"));
            }
        }
        let required = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| parse_error(name, "missing required column"))
        };
        let area_id = required("area_id")?;
        let psi = required("psi")?;

        let response = match (index.get("y"), index.get("z")) {
            (Some(&c), None) => (c, Scale::Raw),
            (None, Some(&c)) => (c, Scale::Log),
            (Some(_), Some(_)) => return Err(parse_error("y", "exactly one of y and z may be present")),
            (None, None) => return Err(parse_error("z", "one of y (raw) or z (log) is required")),
        };

        let raw = numbered(&index, "x_");
        let log = numbered(&index, "w_");
        let covariates = match (raw.is_empty(), log.is_empty()) {
            (false, true) => (contiguous(&raw, "x_")?, Scale::Raw),
            (true, false) => (contiguous(&log, "w_")?, Scale::Log),
            (false, false) => {
                return Err(parse_error("x_1", "covariates must be all raw (x_) or all log (w_)"))
            }
            (true, true) => return Err(parse_error("w_1", "at least one covariate column is required")),
        };
        let p = covariates.0.len();

        let diag = numbered(&index, "sme_diag_");
        let has_full = index.keys().any(|k| k.starts_with("sme_") && !k.starts_with("sme_diag_"));
        let sigma = if !diag.is_empty() {
            if has_full {
                return Err(parse_error("sme_diag_1", "use either sme_diag_k or sme_j_k columns, not both"));
            }
            let cols = contiguous(&diag, "sme_diag_")?;
            if cols.len() != p {
                return Err(parse_error(
                    &format!("sme_diag_{}", cols.len().min(p) + 1),
                    format!("expected {p} diagonal entries, found {}", cols.len()),
                ));
            }
            SigmaLayout::Diagonal(cols)
        } else {
            let mut entries = Vec::with_capacity(p * (p + 1) / 2);
            for j in 1..=p {
                for k in 1..=j {
                    let name = format!("sme_{j}_{k}");
                    let col = index
                        .get(name.as_str())
                        .copied()
                        .ok_or_else(|| parse_error(&name, "missing measurement-error covariance entry"))?;
                    entries.push(((j - 1, k - 1), col));
                }
            }
            SigmaLayout::LowerTriangle(entries)
        };

        Ok(Schema {
            area_id,
            response,
            covariates,
            psi,
            sigma,
        })
    }
}

/// Reads a dataset from any CSV source; areas are returned in row order.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<AreaObservation>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| parse_error("", e.to_string()))?
        .clone();
    let schema = Schema::from_headers(&headers)?;
    let p = schema.covariates.0.len();

    let mut areas = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|pos| pos.line() as usize).unwrap_or(0),
            column: String::new(),
            message: e.to_string(),
        })?;
        let line = record.position().map(|pos| pos.line() as usize).unwrap_or(0);
        let number = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                column: headers[col].to_string(),
                message: format!("'{raw}' is not a finite number"),
            })
        };
        let logged = |col: usize, scale: Scale| -> Result<f64> {
            let v = number(col)?;
            match scale {
                Scale::Log => Ok(v),
                Scale::Raw if v > 0.0 => Ok(v.ln()),
                Scale::Raw => Err(Error::NonPositiveValue {
                    line,
                    column: headers[col].to_string(),
                    value: v,
                }),
            }
        };

        let area_id = record.get(schema.area_id).unwrap_or("").to_string();
        let z = logged(schema.response.0, schema.response.1)?;
        let w = schema
            .covariates
            .0
            .iter()
            .map(|&c| logged(c, schema.covariates.1))
            .collect::<Result<Vec<_>>>()?;
        let psi = number(schema.psi)?;
        let mut sigma = DMatrix::zeros(p, p);
        match &schema.sigma {
            SigmaLayout::Diagonal(cols) => {
                for (k, &c) in cols.iter().enumerate() {
                    sigma[(k, k)] = number(c)?;
                }
            }
            SigmaLayout::LowerTriangle(entries) => {
                for &((j, k), c) in entries {
                    let v = number(c)?;
                    sigma[(j, k)] = v;
                    sigma[(k, j)] = v;
                }
            }
        }
        let obs = AreaObservation::new(area_id, z, DVector::from_vec(w), psi, sigma).map_err(|e| match e {
            Error::InvalidInput(message) => Error::Parse {
                line,
                column: String::new(),
                message,
            },
            other => other,
        })?;
        areas.push(obs);
    }
    Ok(areas)
}

pub fn load_dataset(path: &Path) -> Result<Vec<AreaObservation>> {
    read_dataset(File::open(path)?)
}

/// Writes areas in the log-scale layout with the full lower triangle of `Sigma`.
pub fn write_dataset<W: Write>(areas: &[AreaObservation], writer: W) -> Result<()> {
    let p = areas.first().map(|a| a.p()).unwrap_or(0);
    let mut header = vec!["area_id".to_string(), "z".to_string()];
    header.extend((1..=p).map(|k| format!("w_{k}")));
    header.push("psi".into());
    for j in 1..=p {
        for k in 1..=j {
            header.push(format!("sme_{j}_{k}"));
        }
    }
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(&header).map_err(csv_err)?;
    for a in areas {
        let mut row = vec![a.area_id.clone(), fmt_f64(a.z)];
        row.extend(a.w.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(a.psi));
        for j in 0..p {
            for k in 0..=j {
                row.push(fmt_f64(a.sigma_me[(j, k)]));
            }
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// A CSV table built row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            out.write_record(row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }
}

/// Provenance written next to every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub library_version: &'static str,
    pub input_sha256: Option<String>,
    pub threads: usize,
    pub started_unix_seconds: u64,
    pub finished_unix_seconds: u64,
    pub elapsed_seconds: f64,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
