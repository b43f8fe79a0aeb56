use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capsnet::ArchitectureScale;
use crate::data::{Dataset, SplitSpec, Standardization, NUM_CLASSES};
use crate::error::{config_err, Error, Result};
use crate::training::{LossConfig, OptimizerSettings, TrainConfig};

/// One normal class, or every class in turn. Written as an integer or `"all"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSelection {
    One(u8),
    All,
}

impl Serialize for ClassSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClassSelection::One(c) => s.serialize_u8(*c),
            ClassSelection::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for ClassSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(u8),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(c) => Ok(ClassSelection::One(c)),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl ClassSelection {
    pub fn classes(self) -> Vec<u8> {
        match self {
            ClassSelection::One(c) => vec![c],
            ClassSelection::All => (0..NUM_CLASSES as u8).collect(),
        }
    }
}

impl FromStr for ClassSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ClassSelection::All);
        }
        match s.parse::<u8>() {
            Ok(c) if (c as usize) < NUM_CLASSES => Ok(ClassSelection::One(c)),
            _ => Err(config_err!("class must be 0-9 or `all`, got {s:?}")),
        }
    }
}

impl fmt::Display for ClassSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassSelection::One(c) => write!(f, "{c}"),
            ClassSelection::All => f.write_str("all"),
        }
    }
}

/// A single seed, or a list whose results are averaged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    One(u64),
    Many(Vec<u64>),
}

impl Seeds {
    pub fn list(&self) -> Vec<u64> {
        match self {
            Seeds::One(s) => vec![*s],
            Seeds::Many(v) => v.clone(),
        }
    }
}

/// Everything a run needs. Every field has a default, so an empty TOML file
/// is a valid configuration.
///
/// ```toml
/// dataset = "mnist"
/// normal_class = 0          # or "all"
/// anomaly_fraction = 0.01
/// seed = 7                  # or [1, 2, 3] to average
/// preset = "desk"
/// epochs = 10
///
/// [optimizer]
/// batch_size = 32
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub normal_class: ClassSelection,
    pub anomaly_fraction: f64,
    pub seed: Seeds,
    /// `paper` or `desk`; ignored when `scale` is given.
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<ArchitectureScale>,
    pub epochs: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerSettings,
    pub standardization: Standardization,
    /// Directory holding `<dataset>/` folders of IDX files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub out: PathBuf,
    /// Keep at most this many normal training images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_normal_cap: Option<usize>,
    /// Keep at most this many test images of each label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    /// Start from this checkpoint; with `epochs = 0` the run only evaluates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Mnist,
            normal_class: ClassSelection::One(0),
            anomaly_fraction: 0.1,
            seed: Seeds::One(0),
            preset: "desk".into(),
            scale: None,
            epochs: 10,
            loss: LossConfig::default(),
            optimizer: OptimizerSettings::default(),
            standardization: Standardization::MNIST,
            data_root: None,
            out: PathBuf::from("runs"),
            train_normal_cap: None,
            test_per_class: None,
            checkpoint: None,
            workers: 1,
        }
    }
}

pub const DATA_ROOT_ENV: &str = "CAPSAD_DATA";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Explicit `scale`, else the named preset.
    pub fn architecture(&self) -> Result<ArchitectureScale> {
        match self.scale {
            Some(s) => Ok(s),
            None => ArchitectureScale::preset(&self.preset),
        }
    }

    /// `data_root`, else `$CAPSAD_DATA`, else `./data`.
    pub fn resolved_data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seed.list()
    }

    pub fn split_spec(&self, class: u8, seed: u64) -> SplitSpec {
        SplitSpec { normal_class: class, anomaly_fraction: self.anomaly_fraction, seed }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            scale: self.architecture()?,
            seed,
            epochs: self.epochs,
            loss: self.loss,
            optimizer: self.optimizer,
        })
    }

    /// Checks every field before any data is touched.
    pub fn validate(&self) -> Result<()> {
        self.architecture()?.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.standardization.validate()?;
        if let ClassSelection::One(c) = self.normal_class {
            if c as usize >= NUM_CLASSES {
                return Err(config_err!("normal_class {c} outside 0-9"));
            }
        }
        self.split_spec(0, 0).validate()?;
        if self.seeds().is_empty() {
            return Err(config_err!("seed list is empty"));
        }
        if self.workers == 0 {
            return Err(config_err!("workers must be at least 1"));
        }
        if self.epochs == 0 && self.checkpoint.is_none() {
            return Err(config_err!("epochs = 0 needs a checkpoint to evaluate"));
        }
        if self.test_per_class == Some(0) || self.train_normal_cap == Some(0) {
            return Err(config_err!("split caps must be positive"));
        }
        Ok(())
    }

    /// `<out>/<dataset>/<class>/<fraction>/`, plus `seed-<s>/` when several
    /// seeds are averaged.
    pub fn run_dir(&self, class: u8, seed: u64) -> PathBuf {
        let dir = self.out.join(self.dataset.as_str()).join(class.to_string()).join(fraction_label(self.anomaly_fraction));
        if self.seeds().len() > 1 {
            dir.join(format!("seed-{seed}"))
        } else {
            dir
        }
    }
}

/// Directory-name form of a fraction, e.g. `0.01`.
pub fn fraction_label(f: f64) -> String {
    format!("{f}")
}
