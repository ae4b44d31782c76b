//! File formats shared by the CLI and the tests.
//!
//! * CSV: no header, comma separated, one matrix row per line. Values are
//!   written in Rust's shortest round-trip decimal form, so re-reading yields
//!   the identical `f64`.
//! * GCAM binary: `b"GCAM"`, version byte `1`, rows and cols as little-endian
//!   `u64`, then `rows * cols` little-endian `f64` in row-major order.
//! * Metrics: JSON lines, one object per record, keys sorted.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Number, Value};

use crate::error::{GcaError, Result};
use crate::matrix::DenseMatrix;

pub const GCAM_MAGIC: &[u8; 4] = b"GCAM";
pub const GCAM_VERSION: u8 = 1;
const GCAM_HEADER_LEN: usize = 4 + 1 + 8 + 8;

pub fn parse_matrix_csv(text: &str) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (c, field) in line.split(',').enumerate() {
            let field = field.trim();
            let value: f64 = field.parse().map_err(|_| GcaError::Parse {
                row: r + 1,
                col: c + 1,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !value.is_finite() {
                return Err(GcaError::NonFinite {
                    row: r + 1,
                    col: c + 1,
                    value,
                });
            }
            row.push(value);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(GcaError::Parse {
                    row: r + 1,
                    col: row.len().min(first.len()) + 1,
                    message: format!(
                        "ragged row: {} fields, expected {}",
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GcaError::io(path, e))?;
    parse_matrix_csv(&text)
}

pub fn format_matrix_csv(matrix: &DenseMatrix) -> String {
    let mut out = String::new();
    for row in matrix.row_iter() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(matrix: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    matrix.ensure_finite()?;
    let path = path.as_ref();
    fs::write(path, format_matrix_csv(matrix)).map_err(|e| GcaError::io(path, e))
}

pub fn encode_matrix_bin(matrix: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(GCAM_HEADER_LEN + 8 * matrix.as_slice().len());
    out.extend_from_slice(GCAM_MAGIC);
    out.push(GCAM_VERSION);
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    for x in matrix.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_matrix_bin(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < GCAM_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != GCAM_MAGIC {
            return Err(GcaError::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(GcaError::Truncated {
            expected: GCAM_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != GCAM_MAGIC {
        return Err(GcaError::BadMagic { found: magic });
    }
    if bytes[4] != GCAM_VERSION {
        return Err(GcaError::UnsupportedVersion(bytes[4]));
    }
    let rows = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[13..21].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(GCAM_HEADER_LEN))
        .ok_or_else(|| GcaError::InvalidParameter(format!("dims {rows}x{cols} overflow")))?;
    if bytes.len() < expected {
        return Err(GcaError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[GCAM_HEADER_LEN..expected]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = DenseMatrix::from_vec(rows, cols, data)?;
    m.ensure_finite()?;
    Ok(m)
}

pub fn read_matrix_bin(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GcaError::io(path, e))?;
    decode_matrix_bin(&bytes)
}

pub fn write_matrix_bin(matrix: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    matrix.ensure_finite()?;
    let path = path.as_ref();
    fs::write(path, encode_matrix_bin(matrix)).map_err(|e| GcaError::io(path, e))
}

/// Reads either format, picking GCAM when the file starts with the magic bytes.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| GcaError::io(path, e))?;
    if bytes.starts_with(GCAM_MAGIC) {
        decode_matrix_bin(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| GcaError::Parse {
            row: 0,
            col: 0,
            message: "file is neither GCAM nor UTF-8 CSV".into(),
        })?;
        parse_matrix_csv(&text)
    }
}

/// Names accepted in a [`MetricsRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Loss,
    Alignment,
    Uniformity,
    MarginalError,
    ProbeAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Loss,
        Metric::Alignment,
        Metric::Uniformity,
        Metric::MarginalError,
        Metric::ProbeAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Alignment => "alignment",
            Metric::Uniformity => "uniformity",
            Metric::MarginalError => "marginal_error",
            Metric::ProbeAccuracy => "probe_accuracy",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = GcaError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GcaError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub values: BTreeMap<Metric, f64>,
}

impl MetricsRecord {
    pub fn new(step: usize) -> Self {
        Self {
            step,
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, metric: Metric, value: f64) -> Self {
        self.values.insert(metric, value);
        self
    }

    pub fn set(&mut self, metric: Metric, value: f64) {
        self.values.insert(metric, value);
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.get(&metric).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (m, &v) in &self.values {
            if !v.is_finite() {
                return Err(GcaError::InvalidParameter(format!(
                    "metric {m} is not finite ({v})"
                )));
            }
        }
        Ok(())
    }

    /// Serializes to a single JSON object with lexicographically sorted keys.
    pub fn to_json_line(&self) -> Result<String> {
        self.validate()?;
        // serde_json's Map is ordered by key without the preserve_order feature
        let mut map = Map::new();
        map.insert("step".into(), Value::from(self.step as u64));
        for (m, &v) in &self.values {
            let n = Number::from_f64(v).expect("validated finite");
            map.insert(m.name().into(), Value::Number(n));
        }
        Ok(serde_json::to_string(&Value::Object(map))?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(line)?;
        let obj = value
            .as_object()
            .ok_or_else(|| GcaError::InvalidParameter("metrics line is not an object".into()))?;
        let mut rec = MetricsRecord::new(0);
        for (k, v) in obj {
            if k == "step" {
                rec.step = v
                    .as_u64()
                    .ok_or_else(|| GcaError::InvalidParameter("step must be an integer".into()))?
                    as usize;
            } else {
                let m: Metric = k.parse()?;
                let x = v.as_f64().ok_or_else(|| {
                    GcaError::InvalidParameter(format!("metric {k} is not a number"))
                })?;
                rec.set(m, x);
            }
        }
        rec.validate()?;
        Ok(rec)
    }
}

pub fn append_metrics_jsonl(record: &MetricsRecord, path: impl AsRef<Path>) -> Result<()> {
    let line = record.to_json_line()?;
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GcaError::io(path, e))?;
    writeln!(file, "{line}").map_err(|e| GcaError::io(path, e))
}

pub fn read_metrics_jsonl(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GcaError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::from_json_line)
        .collect()
}
