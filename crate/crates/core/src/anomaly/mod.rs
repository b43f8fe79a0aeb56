//! Anomaly scoring, threshold fitting and evaluation metrics.
//!
//! The score combines the capsule-length difference with the normal-class
//! reconstruction error: `score = z_a - z_n + r_l`. Higher is more anomalous.

mod dump;
mod logistic;
mod roc;

pub use dump::{parse_score_dump, read_score_dump, score_dump_string, write_score_dump, SCORE_DUMP_HEADER};
pub use logistic::{fit_threshold, LogisticThreshold, FIT_MAX_ITERATIONS, FIT_TOLERANCE};
pub use roc::{auc_by_concordance, roc, RocCurve};

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::Label;

/// One scored sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub z_n: f64,
    pub z_a: f64,
    pub r_l: f64,
    pub score: f64,
    pub label: Option<Label>,
}

impl AnomalyRecord {
    pub fn new(z_n: f64, z_a: f64, r_l: f64, label: Option<Label>) -> Result<Self> {
        Ok(Self { z_n, z_a, r_l, score: anomaly_score(z_n, z_a, r_l)?, label })
    }

    /// Capsule-length difference alone.
    pub fn length_difference(&self) -> f64 {
        self.z_a - self.z_n
    }
}

/// Which scalar of a record to rank by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `z_a - z_n`
    LengthDifference,
    /// `r_l`
    Reconstruction,
    /// `z_a - z_n + r_l`
    Combined,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::LengthDifference, ScoreKind::Reconstruction, ScoreKind::Combined];

    pub fn of(self, r: &AnomalyRecord) -> f64 {
        match self {
            ScoreKind::LengthDifference => r.length_difference(),
            ScoreKind::Reconstruction => r.r_l,
            ScoreKind::Combined => r.score,
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            ScoreKind::LengthDifference => "roc-length-diff",
            ScoreKind::Reconstruction => "roc-recon",
            ScoreKind::Combined => "roc-combined",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ScoreKind::LengthDifference => "z_a - z_n",
            ScoreKind::Reconstruction => "r_l",
            ScoreKind::Combined => "z_a - z_n + r_l",
        }
    }
}

/// `z_a - z_n + r_l`, rejecting components outside `[0, 1]` (a sign of a
/// normalization bug upstream).
pub fn anomaly_score(z_n: f64, z_a: f64, r_l: f64) -> Result<f64> {
    for (name, v) in [("z_n", z_n), ("z_a", z_a), ("r_l", r_l)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(usage_err!("{name} = {v} outside [0, 1]"));
        }
    }
    Ok(z_a - z_n + r_l)
}

/// Anomaly iff `score > threshold`; a score exactly at the threshold is normal.
pub fn classify(score: f64, threshold: &LogisticThreshold) -> Label {
    classify_at(score, threshold.threshold)
}

pub fn classify_at(score: f64, threshold: f64) -> Label {
    if score > threshold {
        Label::Anomaly
    } else {
        Label::Normal
    }
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[Label], labels: &[Label]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(usage_err!("accuracy of an empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(usage_err!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Labels of labeled records; errors if any record is unlabeled.
pub fn labels_of(records: &[AnomalyRecord]) -> Result<Vec<Label>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.label.ok_or_else(|| usage_err!("record {i} has no label")))
        .collect()
}
