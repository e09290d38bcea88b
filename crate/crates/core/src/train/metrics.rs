use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibp::StateFractions;
use crate::io::write_atomic;

/// One epoch of training, as written to the metrics CSV.
///
/// `eps` and `lambda` are the values used by the epoch's last optimizer
/// step; losses are batch-size-weighted means over the epoch; errors,
/// fractions and the tightness ratio come from the held-out evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub eps: f64,
    pub lambda: f64,
    pub lr: f64,
    pub loss: f64,
    pub l_rob: f64,
    pub l_tightness: f64,
    pub l_relu: f64,
    pub standard_error: f64,
    pub verified_error: f64,
    pub active: f64,
    pub inactive: f64,
    pub unstable: f64,
    /// `ln(Ê(Δₘ)/Ê(Δ₀))` at the evaluation radius.
    pub log_tightness_ratio: f64,
}

impl MetricsRow {
    pub fn fractions(&self) -> StateFractions {
        StateFractions {
            active: self.active,
            inactive: self.inactive,
            unstable: self.unstable,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Serializes rows as CSV: a header naming every field, then one LF-terminated
/// line per row.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(true)
        .from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(HEADER).map_err(csv_error)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, &metrics_csv(rows)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub const HEADER: [&str; 14] = [
    "epoch",
    "eps",
    "lambda",
    "lr",
    "loss",
    "l_rob",
    "l_tightness",
    "l_relu",
    "standard_error",
    "verified_error",
    "active",
    "inactive",
    "unstable",
    "log_tightness_ratio",
];
