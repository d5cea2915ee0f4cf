//! Multi-label metrics over binary label matrices.
//!
//! Inputs are decided labels, never probabilities. Any ratio whose
//! denominator is zero evaluates to 0 and sets a `degenerate` flag.

mod analysis;
mod render;

pub use analysis::{fn_fp_table, misclassification_report, CoPrediction, FnFpRow, LabelSetTally};
pub use render::{format_parameter_count, format_percent, render_fn_fp_table, render_misclassification, render_report};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{LabelSchema, LabelVector};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predicted} predicted rows but {truth} truth rows")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("row {row} has width {found}, expected {expected}")]
    WidthMismatch { row: usize, expected: usize, found: usize },
    #[error("no samples to evaluate")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub sample_count: u64,
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn zeros(width: usize) -> Self {
        Self {
            sample_count: 0,
            classes: vec![ClassCounts::default(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.classes.len()
    }

    /// Cell-wise sum; counts over disjoint sample ranges merge exactly.
    /// Counts over zero samples of unknown width act as the identity.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<(), EvalError> {
        let unknown = |c: &ConfusionCounts| c.sample_count == 0 && c.width() == 0;
        if unknown(other) {
            return Ok(());
        }
        if unknown(self) {
            *self = other.clone();
            return Ok(());
        }
        if other.width() != self.width() {
            return Err(EvalError::WidthMismatch {
                row: 0,
                expected: self.width(),
                found: other.width(),
            });
        }
        self.sample_count += other.sample_count;
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        Ok(())
    }

    pub fn add_sample(&mut self, predicted: &[u8], truth: &[u8]) {
        self.sample_count += 1;
        for ((c, &p), &t) in self.classes.iter_mut().zip(predicted).zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }

    fn pooled(&self) -> (u64, u64, u64) {
        self.classes
            .iter()
            .fold((0, 0, 0), |(tp, fp, fnn), c| (tp + c.tp, fp + c.fp, fnn + c.fn_))
    }
}

fn check_aligned(predicted: &[LabelVector], truth: &[LabelVector]) -> Result<usize, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let width = truth.first().map_or(0, LabelVector::len);
    for (row, (p, t)) in predicted.iter().zip(truth).enumerate() {
        for found in [p.len(), t.len()] {
            if found != width {
                return Err(EvalError::WidthMismatch { row, expected: width, found });
            }
        }
    }
    Ok(width)
}

pub fn confusion_counts(predicted: &[LabelVector], truth: &[LabelVector]) -> Result<ConfusionCounts, EvalError> {
    let width = check_aligned(predicted, truth)?;
    let mut counts = ConfusionCounts::zeros(width);
    for (p, t) in predicted.iter().zip(truth) {
        counts.add_sample(p.flags(), t.flags());
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(precision: f64, recall: f64) -> (f64, bool) {
    let den = precision + recall;
    if den == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / den, false)
    }
}

fn prf(tp: u64, fp: u64, fnn: u64) -> ClassMetrics {
    let (precision, d1) = ratio(tp, tp + fp);
    let (recall, d2) = ratio(tp, tp + fnn);
    let (f1, d3) = harmonic(precision, recall);
    ClassMetrics {
        precision,
        recall,
        f1,
        degenerate: d1 || d2 || d3,
    }
}

pub fn class_f1(counts: &ConfusionCounts) -> Vec<ClassMetrics> {
    counts.classes.iter().map(|c| prf(c.tp, c.fp, c.fn_)).collect()
}

/// Unweighted mean of per-class F1; 0 for no classes.
pub fn macro_f1(metrics: &[ClassMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.f1).sum::<f64>() / metrics.len() as f64
}

/// Precision, recall and F1 from TP/FP/FN pooled over all classes.
pub fn micro_f1(counts: &ConfusionCounts) -> ClassMetrics {
    let (tp, fp, fnn) = counts.pooled();
    prf(tp, fp, fnn)
}

/// Fraction of samples whose whole predicted vector equals the truth.
pub fn match_ratio(predicted: &[LabelVector], truth: &[LabelVector]) -> Result<f64, EvalError> {
    check_aligned(predicted, truth)?;
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let exact = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(exact as f64 / truth.len() as f64)
}

/// (ΣTP + ΣTN) / (samples × classes).
pub fn label_accuracy(counts: &ConfusionCounts) -> f64 {
    let cells = counts.sample_count * counts.width() as u64;
    let right: u64 = counts.classes.iter().map(|c| c.tp + c.tn).sum();
    ratio(right, cells).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub code: String,
    #[serde(flatten)]
    pub counts: ClassCounts,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub sample_count: u64,
    pub match_ratio: f64,
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_degenerate: bool,
    pub macro_f1: f64,
    pub label_accuracy: f64,
    pub classes: Vec<ClassReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_count: Option<u64>,
}

impl MetricsReport {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts {
            sample_count: self.sample_count,
            classes: self.classes.iter().map(|c| c.counts).collect(),
        }
    }

    pub fn class_metrics(&self) -> Vec<ClassMetrics> {
        self.classes.iter().map(|c| c.metrics).collect()
    }

    pub fn degenerate_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|c| c.metrics.degenerate)
            .map(|c| c.code.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Full report for aligned label matrices. Widths must match the schema.
pub fn evaluate(
    predicted: &[LabelVector],
    truth: &[LabelVector],
    schema: &LabelSchema,
) -> Result<MetricsReport, EvalError> {
    let width = check_aligned(predicted, truth)?;
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    if width != schema.size() {
        return Err(EvalError::WidthMismatch {
            row: 0,
            expected: schema.size(),
            found: width,
        });
    }
    let counts = confusion_counts(predicted, truth)?;
    let per_class = class_f1(&counts);
    let micro = micro_f1(&counts);
    Ok(MetricsReport {
        model: None,
        sample_count: counts.sample_count,
        match_ratio: match_ratio(predicted, truth)?,
        micro_f1: micro.f1,
        micro_precision: micro.precision,
        micro_recall: micro.recall,
        micro_degenerate: micro.degenerate,
        macro_f1: macro_f1(&per_class),
        label_accuracy: label_accuracy(&counts),
        classes: schema
            .codes()
            .into_iter()
            .zip(counts.classes.iter().zip(&per_class))
            .map(|(code, (c, m))| ClassReport {
                code,
                counts: *c,
                metrics: *m,
            })
            .collect(),
        parameter_count: None,
    })
}
