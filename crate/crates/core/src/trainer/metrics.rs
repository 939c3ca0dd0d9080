use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = ["epoch", "step", "loss_total", "loss_g", "loss_l", "probe_acc", "lr", "tau"];

/// One metrics row. Fields that were not measured are NaN and serialize as
/// empty CSV cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_g: f64,
    pub loss_l: f64,
    pub probe_acc: f64,
    pub lr: f64,
    pub tau: f64,
}

impl MetricsRecord {
    pub fn empty(epoch: usize, step: usize) -> Self {
        let nan = f64::NAN;
        MetricsRecord { epoch, step, loss_total: nan, loss_g: nan, loss_l: nan, probe_acc: nan, lr: nan, tau: nan }
    }

    /// Global loss on the `2 − 2·cos` scale (per view pair, summed over both
    /// directions, so shifted by 4).
    pub fn loss_g_byol(&self) -> f64 {
        self.loss_g + 4.0
    }

    /// Bitwise equality, treating NaN cells as equal.
    pub fn same_bits(&self, other: &Self) -> bool {
        self.epoch == other.epoch && self.step == other.step && self.values().iter().zip(other.values()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn values(&self) -> [f64; 6] {
        [self.loss_total, self.loss_g, self.loss_l, self.probe_acc, self.lr, self.tau]
    }

    fn to_row(self) -> Vec<String> {
        let mut row = vec![self.epoch.to_string(), self.step.to_string()];
        row.extend(self.values().iter().map(|v| if v.is_nan() { String::new() } else { format!("{v:?}") }));
        row
    }

    fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != CSV_HEADER.len() {
            return Err(Error::Data(format!("metrics row has {} fields, expected {}", row.len(), CSV_HEADER.len())));
        }
        let int = |i: usize| row[i].parse::<usize>().map_err(|e| Error::Data(format!("{}: {e}", CSV_HEADER[i])));
        let float = |i: usize| -> Result<f64> {
            if row[i].is_empty() {
                Ok(f64::NAN)
            } else {
                row[i].parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", CSV_HEADER[i])))
            }
        };
        Ok(MetricsRecord {
            epoch: int(0)?,
            step: int(1)?,
            loss_total: float(2)?,
            loss_g: float(3)?,
            loss_l: float(4)?,
            probe_acc: float(5)?,
            lr: float(6)?,
            tau: float(7)?,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("metrics csv: {e}"))
}

/// Append-only CSV sink. The header is written when the file is new or empty.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            inner.write_record(CSV_HEADER).map_err(csv_err)?;
        }
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.write_record(record.to_row()).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Serialize `records` to CSV text, header included.
pub fn to_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(r.to_row()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Data(format!("unexpected metrics header {header:?}")));
    }
    r.records().map(|row| MetricsRecord::from_row(&row.map_err(csv_err)?)).collect()
}

/// End-of-run summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss_total: Option<f64>,
    pub final_loss_g: Option<f64>,
    /// Same global loss on the `2 − 2·cos` scale.
    pub final_loss_g_byol: Option<f64>,
    pub final_loss_l: Option<f64>,
    pub probe_acc_patch: Option<f64>,
    pub probe_acc_post_mlp: Option<f64>,
    /// Per-epoch accuracy at the configured evaluation layer.
    pub probe_acc_history: Vec<f64>,
}

impl RunSummary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Finite values only; NaN becomes `None`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
