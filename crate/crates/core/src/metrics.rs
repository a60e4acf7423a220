//! Per-step and per-evaluation metrics records and their CSV form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

pub const COLUMNS: [&str; 14] = [
    "stage",
    "epoch",
    "step",
    "split",
    "task",
    "l_std",
    "r_at",
    "r_kl",
    "total",
    "accuracy",
    "delta_norm_img",
    "delta_norm_txt",
    "grad_norm",
    "wall_ms",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, $($var:path => $s:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($var),)+
                    other => Err(Error::Parse(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

str_enum!(Stage, "stage", Stage::Pretrain => "pretrain", Stage::Finetune => "finetune");
str_enum!(Split, "split", Split::Train => "train", Split::Val => "val");

/// One CSV row. Training rows carry the loss decomposition of one
/// minibatch; validation rows carry the clean loss and accuracy with the
/// adversarial columns zeroed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub split: Split,
    pub task: Task,
    pub l_std: f64,
    pub r_at: f64,
    pub r_kl: f64,
    pub total: f64,
    pub accuracy: f64,
    pub delta_norm_img: f64,
    pub delta_norm_txt: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn key(&self) -> (Stage, usize, usize) {
        (self.stage, self.epoch, self.step)
    }
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse<T: FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value `{field}`")))
}

pub fn to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.stage.as_str().to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.split.as_str().to_string(),
            r.task.as_str().to_string(),
            float(r.l_std),
            float(r.r_at),
            float(r.r_kl),
            float(r.total),
            float(r.accuracy),
            float(r.delta_norm_img),
            float(r.delta_norm_txt),
            float(r.grad_norm),
            r.wall_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(records)?)?;
    Ok(())
}

pub fn from_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Parse("unexpected metrics header".into()));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        if row.len() != COLUMNS.len() {
            return Err(Error::Parse(format!("row with {} fields", row.len())));
        }
        let f = |i: usize| -> Result<f64> { parse(&row[i], COLUMNS[i]) };
        out.push(MetricsRecord {
            stage: row[0].parse()?,
            epoch: parse(&row[1], "epoch")?,
            step: parse(&row[2], "step")?,
            split: row[3].parse()?,
            task: row[4].parse().map_err(|_| Error::Parse(format!("bad task `{}`", &row[4])))?,
            l_std: f(5)?,
            r_at: f(6)?,
            r_kl: f(7)?,
            total: f(8)?,
            accuracy: f(9)?,
            delta_norm_img: f(10)?,
            delta_norm_txt: f(11)?,
            grad_norm: f(12)?,
            wall_ms: parse(&row[13], "wall_ms")?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    from_csv(&std::fs::read(path)?)
}
