//! MNIST-family ingestion, standardization and the imbalanced-train /
//! balanced-test split construction.

mod idx;

pub use idx::{encode_idx, parse_idx, read_idx_file, IdxArray, IDX_UBYTE};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;
use crate::training::Example;
use crate::Label;

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Mnist,
    Fashion,
    Kmnist,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Mnist, Dataset::Fashion, Dataset::Kmnist];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Fashion => "fashion",
            Dataset::Kmnist => "kmnist",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Dataset::Mnist),
            "fashion" | "fashion-mnist" | "fashion_mnist" => Ok(Dataset::Fashion),
            "kmnist" | "k-mnist" | "kuzushiji" => Ok(Dataset::Kmnist),
            other => Err(config_err!("unknown dataset {other:?} (expected mnist, fashion or kmnist)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Stem of the conventional file names, e.g. `train` / `t10k`.
    pub fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// The four files of a dataset, in `train-images, train-labels, t10k-images,
/// t10k-labels` order.
pub const FILE_STEMS: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// Images rescaled to `[0, 1]` with their 0–9 class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `[N, 28, 28]`
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub source: String,
    pub split: Split,
}

impl LabeledImageSet {
    /// Builds a set from parsed IDX image and label arrays.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray, source: &str, split: Split) -> Result<Self> {
        if images.shape.len() != 3 || images.shape[1] != IMAGE_SIDE || images.shape[2] != IMAGE_SIDE {
            return Err(Error::Data(format!("{source}: expected [N, 28, 28] images, got {:?}", images.shape)));
        }
        if labels.shape.len() != 1 || labels.shape[0] != images.shape[0] {
            return Err(Error::Data(format!(
                "{source}: {} images but label shape {:?}",
                images.shape[0], labels.shape
            )));
        }
        if let Some(bad) = labels.data.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("{source}: label {bad} outside 0-9")));
        }
        let pixels = images.data.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self {
            images: Tensor::new(images.shape.clone(), pixels)?,
            labels: labels.data.clone(),
            source: source.to_string(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Finds `<dir>/<stem>` under the usual spellings: `-idx3-ubyte` or
/// `.idx3-ubyte`, optionally gzipped.
pub fn locate_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    for name in [stem.to_string(), dotted] {
        for candidate in [dir.join(&name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::MissingData {
        path: dir.join(stem),
        hint: "place the IDX file there (optionally .gz), run `capsad fetch`, or point CAPSAD_DATA at the data root"
            .into(),
    })
}

/// Loads one split of `<root>/<dataset>/`.
pub fn load_split(root: &Path, dataset: Dataset, split: Split) -> Result<LabeledImageSet> {
    let dir = root.join(dataset.as_str());
    let (img_stem, lbl_stem) = match split {
        Split::Train => (FILE_STEMS[0], FILE_STEMS[1]),
        Split::Test => (FILE_STEMS[2], FILE_STEMS[3]),
    };
    let images = read_idx_file(&locate_file(&dir, img_stem)?)?;
    let labels = read_idx_file(&locate_file(&dir, lbl_stem)?)?;
    LabeledImageSet::from_idx(&images, &labels, dataset.as_str(), split)
}

/// Train and test splits of a dataset.
pub fn load_dataset(root: &Path, dataset: Dataset) -> Result<(LabeledImageSet, LabeledImageSet)> {
    Ok((load_split(root, dataset, Split::Train)?, load_split(root, dataset, Split::Test)?))
}

/// Per-pixel affine normalization applied after the `/255` rescale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub const MNIST: Standardization = Standardization { mean: 0.1307, std: 0.3081 };

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.mean.is_finite() || !self.std.is_finite() {
            return Err(config_err!("standardization needs a finite mean and std > 0 (got {} / {})", self.mean, self.std));
        }
        Ok(())
    }

    pub fn apply(&self, x: f32) -> f32 {
        ((x as f64 - self.mean) / self.std) as f32
    }
}

impl Default for Standardization {
    fn default() -> Self {
        Self::MNIST
    }
}

/// `(x - mean) / std` elementwise.
pub fn standardize(images: &Tensor<f32>, mean: f64, std: f64) -> Result<Tensor<f32>> {
    let s = Standardization { mean, std };
    s.validate()?;
    Ok(images.map(|x| s.apply(x)))
}

/// `x * std + mean` elementwise.
pub fn destandardize(images: &Tensor<f32>, mean: f64, std: f64) -> Result<Tensor<f32>> {
    Standardization { mean, std }.validate()?;
    Ok(images.map(|x| (x as f64 * std + mean) as f32))
}

/// Which class is normal, what share of the training set is anomalous, and
/// the sampling seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub normal_class: u8,
    pub anomaly_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.normal_class as usize >= NUM_CLASSES {
            return Err(config_err!("normal class {} outside 0-9", self.normal_class));
        }
        if !(0.0..0.5).contains(&self.anomaly_fraction) {
            return Err(config_err!("anomaly fraction {} must lie in [0, 0.5)", self.anomaly_fraction));
        }
        Ok(())
    }

    /// Anomalies to add to `normal_count` normals: `round(N_c · f / (1 − f))`.
    pub fn anomaly_count(&self, normal_count: usize) -> usize {
        let f = self.anomaly_fraction;
        (normal_count as f64 * f / (1.0 - f)).round() as usize
    }
}

/// Binary-labeled subset of a [`LabeledImageSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySet {
    /// `[N, 28, 28]`, in `[0, 1]`
    pub images: Tensor<f32>,
    pub labels: Vec<Label>,
    /// Index of each image in the source set.
    pub source_indices: Vec<usize>,
    pub source: String,
    pub split: Split,
}

impl BinarySet {
    fn gather(set: &LabeledImageSet, picks: &[(usize, Label)]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(picks.len() * IMAGE_PIXELS);
        for &(i, _) in picks {
            pixels.extend_from_slice(set.image(i));
        }
        if picks.is_empty() {
            return Err(config_err!("split of {} is empty", set.source));
        }
        Ok(Self {
            images: Tensor::new(vec![picks.len(), IMAGE_SIDE, IMAGE_SIDE], pixels)?,
            labels: picks.iter().map(|p| p.1).collect(),
            source_indices: picks.iter().map(|p| p.0).collect(),
            source: set.source.clone(),
            split: set.split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Network inputs (standardized) paired with `[0, 1]` reconstruction targets.
    pub fn examples(&self, norm: Standardization) -> Result<Vec<Example<f32>>> {
        norm.validate()?;
        (0..self.len())
            .map(|i| {
                let raw = self.image(i);
                let input = Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], raw.iter().map(|&x| norm.apply(x)).collect())?;
                Example::new(input, raw.to_vec(), self.labels[i])
            })
            .collect()
    }
}

// distinct streams for the two builders so their draws never coincide
const TRAIN_STREAM: u64 = 0x7472_6169_6e5f_7370;
const TEST_STREAM: u64 = 0x7465_7374_5f73_706c;

fn partition(set: &LabeledImageSet, normal_class: u8) -> (Vec<usize>, Vec<usize>) {
    (0..set.len()).partition(|&i| set.labels[i] == normal_class)
}

fn sample(pool: &[usize], amount: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), amount).into_iter().map(|j| pool[j]).collect();
    picked.sort_unstable();
    picked
}

/// Every normal-class training image plus `round(N_c·f/(1−f))` images drawn
/// uniformly without replacement from the other classes, shuffled.
pub fn build_imbalanced_train(set: &LabeledImageSet, spec: SplitSpec) -> Result<BinarySet> {
    build_imbalanced_train_capped(set, spec, None)
}

/// As [`build_imbalanced_train`], keeping at most `normal_cap` normal images
/// (drawn uniformly) for reduced-size runs.
pub fn build_imbalanced_train_capped(set: &LabeledImageSet, spec: SplitSpec, normal_cap: Option<usize>) -> Result<BinarySet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TRAIN_STREAM);
    let (mut normals, others) = partition(set, spec.normal_class);
    if let Some(cap) = normal_cap.filter(|&c| c < normals.len()) {
        normals = sample(&normals, cap, &mut rng);
    }
    let a = spec.anomaly_count(normals.len());
    if a > others.len() {
        return Err(config_err!(
            "{a} anomalies requested but only {} non-normal images are available",
            others.len()
        ));
    }
    let anomalies = sample(&others, a, &mut rng);
    let mut picks: Vec<(usize, Label)> = normals
        .into_iter()
        .map(|i| (i, Label::Normal))
        .chain(anomalies.into_iter().map(|i| (i, Label::Anomaly)))
        .collect();
    picks.shuffle(&mut rng);
    BinarySet::gather(set, &picks)
}

/// All `M` normal-class test images plus `M` images drawn uniformly without
/// replacement from the other classes.
pub fn build_balanced_test(set: &LabeledImageSet, spec: SplitSpec) -> Result<BinarySet> {
    build_balanced_test_capped(set, spec, None)
}

/// As [`build_balanced_test`] with at most `per_class` images of each label.
pub fn build_balanced_test_capped(set: &LabeledImageSet, spec: SplitSpec, per_class: Option<usize>) -> Result<BinarySet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TEST_STREAM);
    let (mut normals, others) = partition(set, spec.normal_class);
    if let Some(cap) = per_class.filter(|&c| c < normals.len()) {
        normals = sample(&normals, cap, &mut rng);
    }
    let m = normals.len();
    if m > others.len() {
        return Err(config_err!("{m} anomalies needed but only {} non-normal images are available", others.len()));
    }
    let anomalies = sample(&others, m, &mut rng);
    let picks: Vec<(usize, Label)> = normals
        .into_iter()
        .map(|i| (i, Label::Normal))
        .chain(anomalies.into_iter().map(|i| (i, Label::Anomaly)))
        .collect();
    BinarySet::gather(set, &picks)
}
