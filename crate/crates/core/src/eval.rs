//! Driver-level classification metrics: accuracy, precision, recall, F1.
//!
//! The abnormal class is the positive class. Empty denominators yield 0 so
//! every metric is a total function of the confusion counts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DriverId;
use crate::scoring::Label;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("driver sets differ: missing from predictions {missing_in_predicted:?}, missing from truth {missing_in_truth:?}")]
    KeyMismatch {
        missing_in_predicted: Vec<DriverId>,
        missing_in_truth: Vec<DriverId>,
    },
    #[error("no drivers to evaluate")]
    Empty,
    #[error("labels file line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(
    predicted: &BTreeMap<DriverId, Label>,
    truth: &BTreeMap<DriverId, Label>,
) -> Result<ConfusionCounts, EvalError> {
    let p: BTreeSet<_> = predicted.keys().copied().collect();
    let t: BTreeSet<_> = truth.keys().copied().collect();
    if p != t {
        return Err(EvalError::KeyMismatch {
            missing_in_predicted: t.difference(&p).copied().collect(),
            missing_in_truth: p.difference(&t).copied().collect(),
        });
    }
    if p.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for (id, pred) in predicted {
        match (pred.is_abnormal(), truth[id].is_abnormal()) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        acc: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
    }
}

/// Reads `driver_id` plus a `classification` or `label` column.
///
/// Extra columns are ignored, so both driver reports and ground-truth files parse.
pub fn read_driver_labels<R: Read>(reader: R) -> Result<BTreeMap<DriverId, Label>, EvalError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("driver_id").ok_or_else(|| EvalError::Malformed {
        line: 1,
        message: "missing driver_id column".into(),
    })?;
    let label_col = col("classification")
        .or_else(|| col("label"))
        .ok_or_else(|| EvalError::Malformed {
            line: 1,
            message: "missing classification/label column".into(),
        })?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| EvalError::Malformed { line, message };
        let id: DriverId = rec
            .get(id_col)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| bad(format!("driver_id: {e}")))?;
        let label: Label = rec.get(label_col).unwrap_or("").parse().map_err(bad)?;
        if out.insert(id, label).is_some() {
            return Err(bad(format!("duplicate driver {id}")));
        }
    }
    Ok(out)
}
