//! Per-epoch metrics CSV: `phase,epoch,lr,train_loss,train_err,valid_err,seconds`.
//!
//! Floats are written with 17 significant digits so they parse back to the
//! same bits. Pretraining rows carry the mean reconstruction error in
//! `train_loss` and leave the error-rate columns empty.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::rbm::PretrainReport;
use crate::trainer::EpochMetrics;

pub const HEADER: [&str; 7] = [
    "phase",
    "epoch",
    "lr",
    "train_loss",
    "train_err",
    "valid_err",
    "seconds",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: Option<f64>,
    pub valid_err: Option<f64>,
    pub seconds: f64,
}

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            phase: Phase::Finetune,
            epoch: m.epoch,
            lr: m.learning_rate,
            train_loss: m.train_loss,
            train_err: Some(m.train_error),
            valid_err: Some(m.valid_error),
            seconds: m.seconds,
        }
    }
}

impl MetricsRow {
    /// One row per pretraining epoch. Epochs of successive RBMs are
    /// numbered consecutively.
    pub fn from_pretrain(reports: &[PretrainReport], lr: f64) -> Vec<MetricsRow> {
        reports
            .iter()
            .flat_map(|r| r.reconstruction_error.iter().zip(&r.epoch_seconds))
            .enumerate()
            .map(|(epoch, (&err, &secs))| MetricsRow {
                phase: Phase::Pretrain,
                epoch,
                lr,
                train_loss: err,
                train_err: None,
                valid_err: None,
                seconds: secs,
            })
            .collect()
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.phase.to_string(),
            r.epoch.to_string(),
            fmt_f64(r.lr),
            fmt_f64(r.train_loss),
            fmt_opt(r.train_err),
            fmt_opt(r.valid_err),
            fmt_f64(r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> csv::Error {
    csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()))
}

fn parse_f64(field: &str) -> csv::Result<f64> {
    field.parse().map_err(|_| bad(format!("bad float {field:?}")))
}

fn parse_opt(field: &str) -> csv::Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field).map(Some)
    }
}

pub fn read_metrics(path: &Path) -> csv::Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(HEADER) {
        return Err(bad("unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record?;
        if rec.len() != HEADER.len() {
            return Err(bad("wrong field count"));
        }
        rows.push(MetricsRow {
            phase: rec[0].parse().map_err(bad)?,
            epoch: rec[1].parse().map_err(|_| bad("bad epoch"))?,
            lr: parse_f64(&rec[2])?,
            train_loss: parse_f64(&rec[3])?,
            train_err: parse_opt(&rec[4])?,
            valid_err: parse_opt(&rec[5])?,
            seconds: parse_f64(&rec[6])?,
        });
    }
    Ok(rows)
}
