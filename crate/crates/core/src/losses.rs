//! Per-example losses and their gradients with respect to the logits.
//!
//! Logits are laid out with old categories first: positions `0..n_old` are
//! the categories of earlier sequences, `n_old..` the current sequence. This
//! matches the model's global order, since expansion always appends.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax, softmax, DenseMatrix};
use crate::model::clamp_output;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Recall L2 on old logits, cross-entropy on new and on all categories.
    Recall,
    /// As `Recall`, with old-category residuals divided by their variance.
    RecallVar,
    /// Recall L2 on old logits, clamped L2 on new and on all categories.
    RecallReg,
    /// `RecallReg` with variance-normalized old residuals.
    RecallVarReg,
    /// Cross-entropy over all categories with zero targets for old ones.
    #[serde(rename = "naive")]
    NaiveBaseline,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Recall,
        LossMode::RecallVar,
        LossMode::RecallReg,
        LossMode::RecallVarReg,
        LossMode::NaiveBaseline,
    ];

    pub fn uses_variance(self) -> bool {
        matches!(self, LossMode::RecallVar | LossMode::RecallVarReg)
    }

    pub fn is_regression(self) -> bool {
        matches!(self, LossMode::RecallReg | LossMode::RecallVarReg)
    }

    pub fn uses_recall_labels(self) -> bool {
        !matches!(self, LossMode::NaiveBaseline)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Recall => "recall",
            LossMode::RecallVar => "recall-var",
            LossMode::RecallReg => "recall-reg",
            LossMode::RecallVarReg => "recall-var-reg",
            LossMode::NaiveBaseline => "naive",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::validation(format!(
                "unknown mode {s:?}; expected recall, recall-var, recall-reg, recall-var-reg or naive"
            ))
        })
    }
}

/// Per old category mean and population variance of the recall labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub floor: f64,
}

impl CategoryStats {
    pub const DEFAULT_FLOOR: f64 = 1e-6;

    /// Divisor applied to the residual of old category `c`.
    #[inline]
    pub fn divisor(&self, c: usize) -> f64 {
        self.variance[c].max(self.floor)
    }

    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }
}

/// Mean and population variance per column of `recall_labels`
/// (`examples × old categories`), both computed in two passes.
pub fn compute_category_stats(recall_labels: &DenseMatrix, floor: f64) -> Result<CategoryStats> {
    let n = recall_labels.rows();
    if n < 2 {
        return Err(Error::validation(format!(
            "category statistics need at least 2 examples, got {n}"
        )));
    }
    if !(floor > 0.0) {
        return Err(Error::validation("variance floor must be positive"));
    }
    let k = recall_labels.cols();
    let mut mean = vec![0.0; k];
    for row in recall_labels.row_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut variance = vec![0.0; k];
    for row in recall_labels.row_iter() {
        for ((s, &v), &m) in variance.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for v in &mut variance {
        *v /= n as f64;
    }
    Ok(CategoryStats { mean, variance, floor })
}

/// Recall loss on old categories: mean of `((o − r) / d)²` where `d` is 1,
/// or the floored per-category variance when `stats` is given.
pub fn loss_old(logits_old: &[f64], recall: &[f64], stats: Option<&CategoryStats>) -> Result<(f64, Vec<f64>)> {
    if recall.len() != logits_old.len() {
        return Err(Error::validation(format!(
            "{} old categories but {} recall label entries",
            logits_old.len(),
            recall.len()
        )));
    }
    if let Some(st) = stats {
        if st.len() != logits_old.len() {
            return Err(Error::validation("category statistics do not cover the old categories"));
        }
    }
    let n = logits_old.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for c in 0..n {
        let d = stats.map_or(1.0, |s| s.divisor(c));
        let q = (logits_old[c] - recall[c]) / d;
        value += q * q;
        grad[c] = 2.0 * q / d * inv_n;
    }
    Ok((value * inv_n, grad))
}

fn hot_index(one_hot: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in one_hot.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::validation("one-hot label has several hot entries"));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::validation(format!("one-hot label has entry {v}")));
        }
    }
    hot.ok_or_else(|| Error::validation("one-hot label has no hot entry"))
}

/// `−(1/|C|)·log softmax(o)[true]` and its gradient `(p − 1_true)/|C|`.
pub(crate) fn cross_entropy_at(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::validation("target index outside the logit range"));
    }
    let inv_n = 1.0 / logits.len() as f64;
    let log_p = log_softmax(logits)?;
    let mut grad = softmax(logits)?;
    grad[target] -= 1.0;
    for g in &mut grad {
        *g *= inv_n;
    }
    Ok((-log_p[target] * inv_n, grad))
}

/// Clamped L2: `(1/|C|)·Σ (clamp(o) − 1[c])²`, gradient wrt the raw logits.
pub(crate) fn clamped_l2_at(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::validation("target index outside the logit range"));
    }
    let inv_n = 1.0 / logits.len() as f64;
    let clamped = clamp_output(logits);
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (c, (&o, &ob)) in logits.iter().zip(&clamped).enumerate() {
        let t = if c == target { 1.0 } else { 0.0 };
        let d = ob - t;
        value += d * d;
        if o > 0.0 && o < 1.0 {
            grad[c] = 2.0 * d * inv_n;
        }
    }
    Ok((value * inv_n, grad))
}

/// Cross-entropy on the current sequence's logits only.
pub fn loss_new_ce(logits_new: &[f64], one_hot: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(logits_new, one_hot)?;
    cross_entropy_at(logits_new, hot_index(one_hot)?)
}

/// Cross-entropy over every known category.
pub fn loss_all_ce(logits_all: &[f64], one_hot: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(logits_all, one_hot)?;
    cross_entropy_at(logits_all, hot_index(one_hot)?)
}

/// Clamped L2 on the current sequence's logits.
pub fn loss_new_reg(logits_new: &[f64], one_hot: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(logits_new, one_hot)?;
    clamped_l2_at(logits_new, hot_index(one_hot)?)
}

/// Clamped L2 over every known category.
pub fn loss_all_reg(logits_all: &[f64], one_hot: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(logits_all, one_hot)?;
    clamped_l2_at(logits_all, hot_index(one_hot)?)
}

fn check_len(logits: &[f64], one_hot: &[f64]) -> Result<()> {
    if logits.len() != one_hot.len() || logits.is_empty() {
        return Err(Error::shape(format!(
            "{} logits for a {}-entry label",
            logits.len(),
            one_hot.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_old: f64,
    pub l_new: f64,
    pub l_all: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.l_old += other.l_old;
        self.l_new += other.l_new;
        self.l_all += other.l_all;
        self.total += other.total;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            l_old: self.l_old * f,
            l_new: self.l_new * f,
            l_all: self.l_all * f,
            total: self.total * f,
        }
    }
}

/// Supervision for one example.
#[derive(Debug, Clone, Copy)]
pub struct ExampleTarget<'a> {
    /// Position of the true category among all known logits; always a
    /// current-sequence category, so `>= n_old`.
    pub class_index: usize,
    /// Recall label over the old categories; empty at sequence 0 and for the
    /// naive baseline.
    pub recall: &'a [f64],
}

/// Total loss of one example for `mode` at sequence `sequence` and its
/// gradient with respect to all logits.
///
/// At sequence 0 only the new-category term is used. Afterwards the total is
/// the sum of the old, new and all-category terms. The naive baseline
/// ignores recall labels and reports its single cross-entropy over all
/// categories as `l_all` (as `l_new` at sequence 0).
pub fn combined_loss(
    mode: LossMode,
    sequence: usize,
    logits: &[f64],
    n_old: usize,
    target: &ExampleTarget<'_>,
    stats: Option<&CategoryStats>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n_all = logits.len();
    if sequence == 0 && n_old != 0 {
        return Err(Error::validation("sequence 0 cannot have old categories"));
    }
    if sequence > 0 && n_old == 0 {
        return Err(Error::validation(format!("sequence {sequence} has no old categories")));
    }
    if target.class_index < n_old || target.class_index >= n_all {
        return Err(Error::validation(format!(
            "label position {} is not a current-sequence category ({}..{})",
            target.class_index, n_old, n_all
        )));
    }
    let recall_expected = sequence > 0 && mode.uses_recall_labels();
    if recall_expected && target.recall.len() != n_old {
        return Err(Error::validation(format!(
            "recall label has {} entries for {} old categories",
            target.recall.len(),
            n_old
        )));
    }
    if !recall_expected && !target.recall.is_empty() {
        return Err(Error::validation(format!(
            "mode {mode} at sequence {sequence} takes no recall labels"
        )));
    }
    let stats = match (mode.uses_variance() && sequence > 0, stats) {
        (true, Some(s)) => Some(s),
        (true, None) => return Err(Error::validation(format!("mode {mode} needs category statistics"))),
        (false, Some(_)) => {
            return Err(Error::validation(format!(
                "category statistics given to mode {mode} at sequence {sequence}"
            )))
        }
        (false, None) => None,
    };

    let mut grad = vec![0.0; n_all];
    let mut out = LossBreakdown::default();

    if mode == LossMode::NaiveBaseline {
        let (v, g) = cross_entropy_at(logits, target.class_index)?;
        grad.copy_from_slice(&g);
        if sequence == 0 {
            out.l_new = v;
        } else {
            out.l_all = v;
        }
        out.total = v;
        return Ok((out, grad));
    }

    let term = if mode.is_regression() {
        clamped_l2_at
    } else {
        cross_entropy_at
    };

    let (v_new, g_new) = term(&logits[n_old..], target.class_index - n_old)?;
    out.l_new = v_new;
    for (g, d) in grad[n_old..].iter_mut().zip(&g_new) {
        *g += d;
    }
    if sequence == 0 {
        out.total = v_new;
        return Ok((out, grad));
    }

    let (v_old, g_old) = loss_old(&logits[..n_old], target.recall, stats)?;
    out.l_old = v_old;
    for (g, d) in grad[..n_old].iter_mut().zip(&g_old) {
        *g += d;
    }

    let (v_all, g_all) = term(logits, target.class_index)?;
    out.l_all = v_all;
    for (g, d) in grad.iter_mut().zip(&g_all) {
        *g += d;
    }
    out.total = out.l_old + out.l_new + out.l_all;
    Ok((out, grad))
}
