//! Evaluation: accuracy matrices, pooled logit variance and forgetting.
//!
//! Prediction is the argmax of the raw logits over every known category,
//! ties going to the smallest category id. The same rule applies in every
//! loss mode. Per-origin accuracy restricts the ground truth to one
//! sequence's categories while predictions still range over all of them.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, SequenceManifest};
use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::model::MultiHeadModel;
use crate::trainer::{batched_logits, TrainConfig};

/// Predicted logit position: the largest logit, ties to the smallest id.
pub fn predict_position(logits: &[f64], category_ids: &[u32]) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        let (l, b) = (logits[i], logits[best]);
        if l > b || (l == b && category_ids[i] < category_ids[best]) {
            best = i;
        }
    }
    best
}

/// Accuracy of one model on validation data, split by origin sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Evaluation {
    pub fn overall(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        let correct: usize = self.correct.iter().sum();
        correct as f64 / total as f64
    }

    pub fn per_origin(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.counts)
            .map(|(&c, &n)| c as f64 / n as f64)
            .collect()
    }
}

/// Accuracy after sequence `sequence` on validation examples of all
/// categories seen so far.
pub fn evaluate(
    model: &MultiHeadModel,
    val: &FeatureDataset,
    manifest: &SequenceManifest,
    sequence: usize,
    shard_size: usize,
) -> Result<Evaluation> {
    let order = model.category_order();
    let position: HashMap<u32, usize> = order.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let origin = manifest.sequence_of();
    let mut correct = vec![0; sequence + 1];
    let mut counts = vec![0; sequence + 1];
    let mut truth = Vec::with_capacity(val.len());
    for e in val.examples() {
        let (Some(&pos), Some(&k)) = (position.get(&e.category_id), origin.get(&e.category_id)) else {
            return Err(Error::validation(format!(
                "validation example {} has category {}, unknown to the model",
                e.example_id, e.category_id
            )));
        };
        if k > sequence {
            return Err(Error::validation(format!(
                "validation category {} arrives after sequence {sequence}",
                e.category_id
            )));
        }
        truth.push((pos, k));
    }
    let logits = batched_logits(model, &val.feature_matrix(0..val.len()), shard_size)?;
    for (i, &(pos, k)) in truth.iter().enumerate() {
        counts[k] += 1;
        if predict_position(logits.row(i), &order) == pos {
            correct[k] += 1;
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::validation(format!(
            "no validation examples for the categories of sequence {k}"
        )));
    }
    Ok(Evaluation { correct, counts })
}

/// Population variance over every logit of every example, two-pass.
pub fn pooled_variance(logits: &DenseMatrix) -> Result<f64> {
    let n = logits.data().len();
    if n < 2 {
        return Err(Error::validation(format!(
            "logit variance needs at least 2 values, got {n}"
        )));
    }
    let mean = logits.data().iter().sum::<f64>() / n as f64;
    let ss: f64 = logits.data().iter().map(|&v| (v - mean) * (v - mean)).sum();
    Ok(ss / n as f64)
}

pub fn logit_variance(model: &MultiHeadModel, val: &FeatureDataset, shard_size: usize) -> Result<f64> {
    let logits = batched_logits(model, &val.feature_matrix(0..val.len()), shard_size)?;
    pooled_variance(&logits)
}

/// `F[k] = max_s A[s][k] − A[last][k]` over rows `s ≥ k`.
pub fn forgetting_summary(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(last) = matrix.last() else {
        return Ok(Vec::new());
    };
    for (s, row) in matrix.iter().enumerate() {
        if row.len() != s + 1 {
            return Err(Error::validation(format!(
                "accuracy matrix row {s} has {} entries, expected {}",
                row.len(),
                s + 1
            )));
        }
    }
    Ok((0..last.len())
        .map(|k| {
            let best = matrix[k..].iter().map(|row| row[k]).fold(f64::NEG_INFINITY, f64::max);
            best - last[k]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTracePoint {
    pub sequence: usize,
    pub variance: f64,
}

/// Everything measured during a curriculum run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sequences: Vec<Vec<u32>>,
    /// Accuracy over all categories seen so far, after each sequence.
    pub overall_accuracy: Vec<f64>,
    /// Row `s` holds `A[s][k]` for `k ≤ s`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Validation example counts behind each `A[s][k]`.
    pub example_counts: Vec<Vec<usize>>,
    pub variance_trace: Vec<VarianceTracePoint>,
    pub config: TrainConfig,
}

pub const ACCURACY_MATRIX_CSV: &str = "accuracy_matrix.csv";
pub const VARIANCE_TRACE_CSV: &str = "variance_trace.csv";
pub const OVERALL_ACCURACY_CSV: &str = "overall_accuracy.csv";
pub const REPORT_JSON: &str = "report.json";

impl MetricsReport {
    pub fn new(config: TrainConfig, sequences: Vec<Vec<u32>>) -> Self {
        Self {
            sequences,
            overall_accuracy: Vec::new(),
            accuracy_matrix: Vec::new(),
            example_counts: Vec::new(),
            variance_trace: Vec::new(),
            config,
        }
    }

    pub fn push_sequence(&mut self, eval: Evaluation, variance: f64) -> Result<()> {
        let s = self.overall_accuracy.len();
        if eval.counts.len() != s + 1 {
            return Err(Error::contract(format!(
                "evaluation for sequence {s} has {} origin rows",
                eval.counts.len()
            )));
        }
        self.overall_accuracy.push(eval.overall());
        self.accuracy_matrix.push(eval.per_origin());
        self.example_counts.push(eval.counts);
        self.variance_trace.push(VarianceTracePoint { sequence: s, variance });
        Ok(())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.overall_accuracy.last().copied()
    }

    pub fn forgetting(&self) -> Result<Vec<f64>> {
        forgetting_summary(&self.accuracy_matrix)
    }

    /// Checks shape, ranges, and that each overall accuracy equals the
    /// count-weighted mean of its matrix row.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.overall_accuracy.len();
        if self.accuracy_matrix.len() != n || self.example_counts.len() != n || self.variance_trace.len() != n {
            return Err(Error::contract("report columns have different lengths"));
        }
        for s in 0..n {
            let row = &self.accuracy_matrix[s];
            let counts = &self.example_counts[s];
            if row.len() != s + 1 || counts.len() != s + 1 {
                return Err(Error::contract(format!("accuracy row {s} is not lower-triangular")));
            }
            if row
                .iter()
                .chain([&self.overall_accuracy[s]])
                .any(|a| !(0.0..=1.0).contains(a))
            {
                return Err(Error::contract(format!("accuracy outside [0, 1] in row {s}")));
            }
            let total: usize = counts.iter().sum();
            let weighted: f64 = row.iter().zip(counts).map(|(a, &c)| a * c as f64).sum::<f64>() / total as f64;
            if (weighted - self.overall_accuracy[s]).abs() > 1e-12 {
                return Err(Error::contract(format!(
                    "overall accuracy {} disagrees with row {s} ({weighted})",
                    self.overall_accuracy[s]
                )));
            }
            if !(self.variance_trace[s].variance >= 0.0) {
                return Err(Error::contract("negative logit variance"));
            }
        }
        Ok(())
    }

    pub fn accuracy_matrix_csv(&self) -> String {
        let n = self.accuracy_matrix.len();
        let mut out = String::from("s");
        for k in 0..n {
            out.push_str(&format!(",k{k}"));
        }
        out.push('\n');
        for (s, row) in self.accuracy_matrix.iter().enumerate() {
            out.push_str(&s.to_string());
            for k in 0..n {
                out.push(',');
                if let Some(a) = row.get(k) {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn variance_trace_csv(&self) -> String {
        let mut out = String::from("sequence,variance\n");
        for p in &self.variance_trace {
            out.push_str(&format!("{},{}\n", p.sequence, p.variance));
        }
        out
    }

    pub fn overall_accuracy_csv(&self) -> String {
        let mut out = String::from("sequence,overall_accuracy\n");
        for (s, a) in self.overall_accuracy.iter().enumerate() {
            out.push_str(&format!("{s},{a}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::contract(format!("report encoding: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: REPORT_JSON.into(),
            message: e.to_string(),
        })
    }

    /// Writes the JSON report and the three CSV files into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let files = [
            (REPORT_JSON, self.to_json()?),
            (ACCURACY_MATRIX_CSV, self.accuracy_matrix_csv()),
            (VARIANCE_TRACE_CSV, self.variance_trace_csv()),
            (OVERALL_ACCURACY_CSV, self.overall_accuracy_csv()),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report = Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { path, message },
            other => other,
        })?;
        report.check_consistency()?;
        Ok(report)
    }
}

/// Parses `accuracy_matrix.csv` back into lower-triangular rows.
pub fn parse_accuracy_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(0, e.to_string()))?;
        let row = rec
            .iter()
            .skip(1)
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(0, format!("bad accuracy {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_variance_trace_csv(text: &str) -> Result<Vec<VarianceTracePoint>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(0, e.to_string()))?;
        let bad = || Error::format(0, "bad variance trace row");
        out.push(VarianceTracePoint {
            sequence: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            variance: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        });
    }
    Ok(out)
}
