//! Capsule-network anomaly detection for highly imbalanced image datasets.
//!
//! A two-capsule CapsNet (normal / anomaly) is trained as a fully supervised
//! classifier on a training stream where anomalies are a small minority.
//! Each image is then scored with
//!
//! ```text
//! score = z_a - z_n + r_l
//! ```
//!
//! where `z_n`, `z_a` are the lengths of the normal and anomaly digit
//! capsules and `r_l` is the mean squared reconstruction error of a decoder
//! trained on normal images only. A one-dimensional logistic regression on
//! training scores yields the decision threshold.
//!
//! ## Layout
//!
//! - [`numerics`]: dense tensors and a record-and-replay reverse-mode graph
//! - [`capsnet`]: convolution, primary capsules, routing by agreement, decoder
//! - [`training`]: margin and reconstruction losses, Adam, the epoch loop
//! - [`anomaly`]: scoring, threshold fitting, ROC / AUC / accuracy
//! - [`data`]: IDX parsing, standardization, imbalanced / balanced splits
//! - [`experiment`]: configuration, the per-class protocol, reports and plots

pub mod anomaly;
pub mod capsnet;
pub mod data;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Binary class of a sample. Digit capsule 0 is normal, capsule 1 is anomaly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn capsule_index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Anomaly => 1,
        }
    }

    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomaly" => Ok(Label::Anomaly),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}
