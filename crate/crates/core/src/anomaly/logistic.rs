use serde::{Deserialize, Serialize};

use super::{labels_of, AnomalyRecord};
use crate::error::{usage_err, Error, Result};
use crate::Label;

pub const FIT_MAX_ITERATIONS: usize = 10_000;
/// Fit stops once an iteration lowers the mean log-loss by less than this.
pub const FIT_TOLERANCE: f64 = 1e-8;

/// One-dimensional logistic model `p(anomaly | s) = sigmoid(w·s + b)` and
/// the score where it crosses 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticThreshold {
    pub weight: f64,
    pub bias: f64,
    /// `-bias / weight`
    pub threshold: f64,
    pub iterations: usize,
    /// Final mean log-loss.
    pub log_loss: f64,
}

impl LogisticThreshold {
    pub fn probability(&self, score: f64) -> f64 {
        sigmoid(self.weight * score + self.bias)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean log-loss of `(w, b)` on `(score, is_anomaly)` pairs.
pub(crate) fn log_loss(data: &[(f64, f64)], w: f64, b: f64) -> f64 {
    let n = data.len() as f64;
    data.iter()
        .map(|&(s, y)| {
            let z = w * s + b;
            // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
            softplus(z) - y * z
        })
        .sum::<f64>()
        / n
}

fn gradient(data: &[(f64, f64)], w: f64, b: f64) -> (f64, f64) {
    let n = data.len() as f64;
    let (gw, gb) = data.iter().fold((0.0, 0.0), |(gw, gb), &(s, y)| {
        let r = sigmoid(w * s + b) - y;
        (gw + r * s, gb + r)
    });
    (gw / n, gb / n)
}

/// Fits the logistic model on raw training scores by gradient descent with
/// a backtracking (Armijo) line search.
///
/// Stops when the loss decrease falls below [`FIT_TOLERANCE`] or after
/// [`FIT_MAX_ITERATIONS`] iterations. Requires both classes.
pub fn fit_threshold(records: &[AnomalyRecord]) -> Result<LogisticThreshold> {
    if records.is_empty() {
        return Err(usage_err!("threshold fit on an empty record set"));
    }
    let labels = labels_of(records)?;
    let data: Vec<(f64, f64)> = records
        .iter()
        .zip(&labels)
        .map(|(r, l)| (r.score, if *l == Label::Anomaly { 1.0 } else { 0.0 }))
        .collect();
    let anomalies = labels.iter().filter(|l| l.is_anomaly()).count();
    if anomalies == 0 || anomalies == labels.len() {
        return Err(Error::Fit("need at least one record of each class".into()));
    }
    if data.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Fit("non-finite score".into()));
    }

    let (mut w, mut b) = (0.0, 0.0);
    let mut loss = log_loss(&data, w, b);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        let (gw, gb) = gradient(&data, w, b);
        let g2 = gw * gw + gb * gb;
        if g2 == 0.0 {
            break;
        }
        // let the step grow again after a successful iteration
        step *= 2.0;
        let (nw, nb, nloss) = loop {
            let (nw, nb) = (w - step * gw, b - step * gb);
            let nloss = log_loss(&data, nw, nb);
            if nloss <= loss - 0.5 * step * g2 || step < 1e-12 {
                break (nw, nb, nloss);
            }
            step *= 0.5;
        };
        let decrease = loss - nloss;
        if decrease < 0.0 {
            break;
        }
        w = nw;
        b = nb;
        loss = nloss;
        if decrease < FIT_TOLERANCE {
            break;
        }
    }
    let threshold = -b / w;
    if !threshold.is_finite() {
        return Err(Error::Fit(format!("degenerate fit (w = {w}, b = {b}); threshold undefined")));
    }
    Ok(LogisticThreshold { weight: w, bias: b, threshold, iterations, log_loss: loss })
}
