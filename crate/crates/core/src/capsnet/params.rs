use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IMAGE_PIXELS, KERNEL, NUM_DIGIT_CAPS};
use crate::error::{config_err, Result};
use crate::numerics::{uniform_fan_in, Graph, Real, Tensor, Var};

/// Layer widths of the capsule network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureScale {
    pub conv_channels: usize,
    pub primary_capsule_channels: usize,
    pub primary_capsule_dim: usize,
    pub digit_capsule_dim: usize,
    pub routing_iterations: usize,
    pub decoder_hidden: [usize; 2],
}

impl ArchitectureScale {
    /// 256 conv channels, 32×6×6 = 1152 primary capsules in ℝ⁸, digit
    /// capsules in ℝ¹⁶, 3 routing iterations, decoder 512 → 1024 → 784.
    pub const fn paper() -> Self {
        Self {
            conv_channels: 256,
            primary_capsule_channels: 32,
            primary_capsule_dim: 8,
            digit_capsule_dim: 16,
            routing_iterations: 3,
            decoder_hidden: [512, 1024],
        }
    }

    /// Reduced widths for single-core CPU runs; capsule dimensions and
    /// routing are unchanged.
    pub const fn desk() -> Self {
        Self {
            conv_channels: 32,
            primary_capsule_channels: 8,
            primary_capsule_dim: 8,
            digit_capsule_dim: 16,
            routing_iterations: 3,
            decoder_hidden: [128, 256],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(config_err!("unknown architecture preset {other:?} (expected paper or desk)")),
        }
    }

    /// Side of the primary-capsule grid: 28 → 20 (9×9, stride 1) → 6 (9×9, stride 2).
    pub const fn primary_grid() -> usize {
        ((super::IMAGE_SIDE - KERNEL + 1) - KERNEL) / super::PRIMARY_STRIDE + 1
    }

    pub fn num_primary(&self) -> usize {
        Self::primary_grid() * Self::primary_grid() * self.primary_capsule_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("conv_channels", self.conv_channels),
            ("primary_capsule_channels", self.primary_capsule_channels),
            ("primary_capsule_dim", self.primary_capsule_dim),
            ("digit_capsule_dim", self.digit_capsule_dim),
            ("routing_iterations", self.routing_iterations),
            ("decoder_hidden[0]", self.decoder_hidden[0]),
            ("decoder_hidden[1]", self.decoder_hidden[1]),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(config_err!("architecture field {name} must be positive"));
            }
        }
        Ok(())
    }
}

pub(crate) const TENSOR_NAMES: [&str; 11] = [
    "conv1.weight",
    "conv1.bias",
    "primary.weight",
    "primary.bias",
    "caps.weight",
    "decoder1.weight",
    "decoder1.bias",
    "decoder2.weight",
    "decoder2.bias",
    "decoder3.weight",
    "decoder3.bias",
];

/// Number of leading entries of [`TENSOR_NAMES`] that belong to the encoder.
pub(crate) const ENCODER_TENSORS: usize = 5;

/// All trainable weights plus the metadata stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T: Real = f32> {
    pub scale: ArchitectureScale,
    pub seed: u64,
    pub step: u64,
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub primary_weight: Tensor<T>,
    pub primary_bias: Tensor<T>,
    /// `[num_primary, 2, digit_dim, primary_dim]`, one matrix per
    /// (primary capsule, digit capsule) pair.
    pub caps_weight: Tensor<T>,
    pub decoder1_weight: Tensor<T>,
    pub decoder1_bias: Tensor<T>,
    pub decoder2_weight: Tensor<T>,
    pub decoder2_bias: Tensor<T>,
    pub decoder3_weight: Tensor<T>,
    pub decoder3_bias: Tensor<T>,
}

/// Graph handles for every parameter tensor, in [`TENSOR_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub all: [Var; 11],
}

impl ParamVars {
    pub fn conv1(&self) -> (Var, Var) {
        (self.all[0], self.all[1])
    }
    pub fn primary(&self) -> (Var, Var) {
        (self.all[2], self.all[3])
    }
    pub fn caps(&self) -> Var {
        self.all[4]
    }
    pub fn decoder(&self, layer: usize) -> (Var, Var) {
        (self.all[5 + 2 * layer], self.all[6 + 2 * layer])
    }
}

pub(crate) fn expected_shapes(scale: &ArchitectureScale) -> [Vec<usize>; 11] {
    let s = scale;
    let primary_out = s.primary_capsule_channels * s.primary_capsule_dim;
    let [h1, h2] = s.decoder_hidden;
    [
        vec![s.conv_channels, 1, KERNEL, KERNEL],
        vec![s.conv_channels],
        vec![primary_out, s.conv_channels, KERNEL, KERNEL],
        vec![primary_out],
        vec![s.num_primary(), NUM_DIGIT_CAPS, s.digit_capsule_dim, s.primary_capsule_dim],
        vec![h1, s.digit_capsule_dim],
        vec![h1],
        vec![h2, h1],
        vec![h2],
        vec![IMAGE_PIXELS, h2],
        vec![IMAGE_PIXELS],
    ]
}

impl<T: Real> NetworkParams<T> {
    /// Seeded initialization: fan-in scaled uniform weights (He gain for the
    /// ReLU layers), zero biases.
    pub fn init(scale: ArchitectureScale, seed: u64) -> Result<Self> {
        scale.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = expected_shapes(&scale);
        let k2 = KERNEL * KERNEL;
        // (fan_in, gain) per weight tensor; the routing transform's fan-in is
        // every primary capsule component feeding one digit capsule.
        let fan = [
            (k2, 2.0),
            (scale.conv_channels * k2, 1.0),
            (scale.num_primary() * scale.primary_capsule_dim, 1.0),
            (scale.digit_capsule_dim, 2.0),
            (scale.decoder_hidden[0], 2.0),
            (scale.decoder_hidden[1], 1.0),
        ];
        let mut weight = |i: usize, (fan_in, gain): (usize, f64)| uniform_fan_in(&shapes[i], fan_in, gain, &mut rng);
        let conv1_weight = weight(0, fan[0])?;
        let primary_weight = weight(2, fan[1])?;
        let caps_weight = weight(4, fan[2])?;
        let decoder1_weight = weight(5, fan[3])?;
        let decoder2_weight = weight(7, fan[4])?;
        let decoder3_weight = weight(9, fan[5])?;
        let zeros = |i: usize| Tensor::zeros(shapes[i].clone());
        Ok(Self {
            scale,
            seed,
            step: 0,
            conv1_weight,
            conv1_bias: zeros(1)?,
            primary_weight,
            primary_bias: zeros(3)?,
            caps_weight,
            decoder1_weight,
            decoder1_bias: zeros(6)?,
            decoder2_weight,
            decoder2_bias: zeros(8)?,
            decoder3_weight,
            decoder3_bias: zeros(10)?,
        })
    }

    pub fn tensors(&self) -> [&Tensor<T>; 11] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.primary_weight,
            &self.primary_bias,
            &self.caps_weight,
            &self.decoder1_weight,
            &self.decoder1_bias,
            &self.decoder2_weight,
            &self.decoder2_bias,
            &self.decoder3_weight,
            &self.decoder3_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 11] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.primary_weight,
            &mut self.primary_bias,
            &mut self.caps_weight,
            &mut self.decoder1_weight,
            &mut self.decoder1_bias,
            &mut self.decoder2_weight,
            &mut self.decoder2_bias,
            &mut self.decoder3_weight,
            &mut self.decoder3_bias,
        ]
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        TENSOR_NAMES.into_iter().zip(self.tensors())
    }

    /// True for tensors of the reconstruction decoder.
    pub fn is_decoder_tensor(index: usize) -> bool {
        index >= ENCODER_TENSORS
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn register<'a>(&'a self, graph: &mut Graph<'a, T>) -> ParamVars {
        let t = self.tensors();
        ParamVars { all: t.map(|x| graph.param(x)) }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        for ((name, t), want) in self.named_tensors().zip(expected_shapes(&self.scale)) {
            if t.shape() != want.as_slice() {
                return Err(config_err!("{name} has shape {:?}, expected {want:?}", t.shape()));
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        let t = self.tensors().map(|t| t.cast::<U>());
        let [c1w, c1b, pw, pb, cw, d1w, d1b, d2w, d2b, d3w, d3b] = t;
        NetworkParams {
            scale: self.scale,
            seed: self.seed,
            step: self.step,
            conv1_weight: c1w,
            conv1_bias: c1b,
            primary_weight: pw,
            primary_bias: pb,
            caps_weight: cw,
            decoder1_weight: d1w,
            decoder1_bias: d1b,
            decoder2_weight: d2w,
            decoder2_bias: d2b,
            decoder3_weight: d3w,
            decoder3_bias: d3b,
        }
    }

    /// Assembles parameters from tensors in [`TENSOR_NAMES`] order.
    pub(crate) fn from_tensors(scale: ArchitectureScale, seed: u64, step: u64, t: [Tensor<T>; 11]) -> Result<Self> {
        let [c1w, c1b, pw, pb, cw, d1w, d1b, d2w, d2b, d3w, d3b] = t;
        let params = Self {
            scale,
            seed,
            step,
            conv1_weight: c1w,
            conv1_bias: c1b,
            primary_weight: pw,
            primary_bias: pb,
            caps_weight: cw,
            decoder1_weight: d1w,
            decoder1_bias: d1b,
            decoder2_weight: d2w,
            decoder2_bias: d2b,
            decoder3_weight: d3w,
            decoder3_bias: d3b,
        };
        params.validate()?;
        Ok(params)
    }
}
