use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Error, Result};
use crate::Label;

/// ROC points from (0, 0) to (1, 1) and the trapezoidal area under them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            out.push_str(&format!("{f},{t}\n"));
        }
        out
    }
}

fn class_counts(labels: &[Label]) -> Result<(usize, usize)> {
    if labels.is_empty() {
        return Err(usage_err!("ROC of an empty record set"));
    }
    let pos = labels.iter().filter(|l| l.is_anomaly()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC needs both normal and anomalous records".into()));
    }
    Ok((pos, neg))
}

/// ROC of `scores` (higher = more anomalous) swept over every distinct
/// score; tied scores move the curve diagonally.
pub fn roc(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(usage_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let (pos, neg) = class_counts(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score in ROC input".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_anomaly() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

/// `P(score_anomaly > score_normal)` over all pairs, ties counting ½.
pub fn auc_by_concordance(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (pos, neg) = class_counts(labels)?;
    let mut total = 0.0;
    for (sa, _) in scores.iter().zip(labels).filter(|(_, l)| l.is_anomaly()) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, l)| !l.is_anomaly()) {
            total += if sa > sn {
                1.0
            } else if sa == sn {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (pos * neg) as f64)
}
