//! Two-capsule CapsNet encoder with a normal-class reconstruction decoder.
//!
//! ```text
//! image [1,28,28]
//!   -> conv 9x9 stride 1, ReLU            [C, 20, 20]
//!   -> conv 9x9 stride 2                  [P*D, 6, 6]
//!   -> regroup + squash                   [6*6*P, D]      primary capsules
//!   -> per-capsule transform W            [N, 2, 16]      predictions
//!   -> routing by agreement               [2, 16]         digit capsules
//! decoder: normal capsule (row 0) -> FC ReLU -> FC ReLU -> FC sigmoid [784]
//! ```
//!
//! Digit capsule 0 is the normal class and capsule 1 the anomaly class.

mod checkpoint;
mod params;

pub use checkpoint::{content_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_atomic, write_checkpoint, CHECKPOINT_VERSION};
pub use params::{ArchitectureScale, NetworkParams, ParamVars};

use crate::error::{config_err, Result};
use crate::numerics::{kernels, Graph, Real, Tensor, Var};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const KERNEL: usize = 9;
pub const PRIMARY_STRIDE: usize = 2;
pub const NUM_DIGIT_CAPS: usize = 2;
/// Added under the square root of the squash norm so zero maps to zero smoothly.
pub const SQUASH_EPS: f64 = 1e-8;

/// Forward-pass result for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsOutput<T: Real = f32> {
    /// `[2, digit_dim]`; row 0 normal, row 1 anomaly.
    pub digit_caps: Tensor<T>,
    pub z_n: T,
    pub z_a: T,
    /// `[num_primary, 2]` couplings of the final routing iteration.
    pub couplings: Tensor<T>,
}

/// Graph handles produced by routing.
#[derive(Clone, Debug)]
pub struct Routing {
    /// `[2, digit_dim]`
    pub digit_caps: Var,
    /// Couplings used in each iteration, first to last; each `[n, 2]`.
    pub couplings: Vec<Var>,
}

/// Graph handles produced by the encoder.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub predictions: Var,
    pub routing: Routing,
    /// `[2]` capsule lengths `(z_n, z_a)`.
    pub lengths: Var,
}

/// `(|v|² / (1 + |v|²)) · v / |v|` with the norm taken as `sqrt(|v|² + ε)`.
pub fn squash<T: Real>(v: &[T]) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    kernels::squash_forward(v, v.len(), crate::numerics::cst(SQUASH_EPS))
}

/// Dynamic routing between `predictions: [n, 2, dim]` and the two digit
/// capsules.
///
/// Logits start at zero. Each iteration takes the softmax of every input
/// capsule's logits over the output capsules, forms the coupling-weighted
/// sum of predictions, squashes it, and (except after the last iteration)
/// adds the prediction–output agreement to the logits. The logits stay in
/// the graph, so gradients flow through every iteration.
pub fn routing_by_agreement<T: Real>(g: &mut Graph<'_, T>, predictions: Var, iterations: usize) -> Result<Routing> {
    if iterations < 1 {
        return Err(config_err!("routing needs at least one iteration"));
    }
    let shape = g.value(predictions)?.shape().to_vec();
    let &[n, outputs, _] = shape.as_slice() else {
        return Err(config_err!("routing predictions must be [n, J, D], got {shape:?}"));
    };
    let mut logits = g.constant(Tensor::zeros(vec![n, outputs])?);
    let mut couplings = Vec::with_capacity(iterations);
    let mut digit_caps = None;
    for it in 0..iterations {
        let c = g.softmax(logits, 1)?;
        couplings.push(c);
        let s = g.weighted_sum(c, predictions)?;
        let v = g.squash(s, SQUASH_EPS)?;
        digit_caps = Some(v);
        if it + 1 < iterations {
            let a = g.agreement(predictions, v)?;
            logits = g.add(logits, a)?;
        }
    }
    Ok(Routing { digit_caps: digit_caps.expect("at least one iteration"), couplings })
}

/// Routing on plain tensors: returns `(digit_caps [J, D], final couplings [n, J])`.
pub fn route<T: Real>(predictions: &Tensor<T>, iterations: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = g.param(predictions);
    let r = routing_by_agreement(&mut g, p, iterations)?;
    let last = *r.couplings.last().unwrap();
    Ok((g.value(r.digit_caps)?.clone(), g.value(last)?.clone()))
}

/// Records the encoder for `image: [1, 28, 28]` (already standardized).
pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    vars: &ParamVars,
    scale: &ArchitectureScale,
    image: Var,
) -> Result<EncoderTrace> {
    let shape = g.value(image)?.shape();
    if shape != [1, IMAGE_SIDE, IMAGE_SIDE] {
        return Err(config_err!("image must be [1, {IMAGE_SIDE}, {IMAGE_SIDE}], got {shape:?}"));
    }
    let (w1, b1) = vars.conv1();
    let h = g.conv2d(image, w1, b1, 1)?;
    let h = g.relu(h)?;

    let (wp, bp) = vars.primary();
    let p = g.conv2d(h, wp, bp, PRIMARY_STRIDE)?;
    // channel c = capsule_channel * dim + component; regroup to one row per
    // (capsule_channel, y, x) capsule
    let grid = ArchitectureScale::primary_grid();
    let dim = scale.primary_capsule_dim;
    let p = g.reshape(p, &[scale.primary_capsule_channels, dim, grid * grid])?;
    let p = g.transpose_groups(p)?;
    let p = g.reshape(p, &[scale.num_primary(), dim])?;
    let u = g.squash(p, SQUASH_EPS)?;

    let predictions = g.caps_predict(u, vars.caps())?;
    let routing = routing_by_agreement(g, predictions, scale.routing_iterations)?;
    let lengths = g.row_norm(routing.digit_caps)?;
    Ok(EncoderTrace { predictions, routing, lengths })
}

/// Records the decoder on the normal capsule (row 0 of `digit_caps`).
///
/// The anomaly capsule never feeds the decoder, in training or at test
/// time, so the decoder is a model of the normal class only.
pub fn decode<T: Real>(g: &mut Graph<'_, T>, vars: &ParamVars, digit_caps: Var) -> Result<Var> {
    let shape = g.value(digit_caps)?.shape().to_vec();
    let &[caps, dim] = shape.as_slice() else {
        return Err(config_err!("digit capsules must be [2, D], got {shape:?}"));
    };
    if caps != NUM_DIGIT_CAPS {
        return Err(config_err!("expected {NUM_DIGIT_CAPS} digit capsules, got {caps}"));
    }
    let mut x = g.slice(digit_caps, 0, &[dim])?;
    for layer in 0..3 {
        let (w, b) = vars.decoder(layer);
        x = g.dense(x, w, b)?;
        x = if layer < 2 { g.relu(x)? } else { g.sigmoid(x)? };
    }
    Ok(x)
}

/// Full encoder pass for one standardized image.
pub fn forward<T: Real>(image: &Tensor<T>, params: &NetworkParams<T>) -> Result<CapsOutput<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.param(image);
    let trace = encode(&mut g, &vars, &params.scale, x)?;
    caps_output(&g, &trace)
}

pub(crate) fn caps_output<T: Real>(g: &Graph<'_, T>, trace: &EncoderTrace) -> Result<CapsOutput<T>> {
    let lengths = g.value(trace.lengths)?.data();
    Ok(CapsOutput {
        digit_caps: g.value(trace.routing.digit_caps)?.clone(),
        z_n: lengths[0],
        z_a: lengths[1],
        couplings: g.value(*trace.routing.couplings.last().unwrap())?.clone(),
    })
}

/// Decoder output (`[784]`, values in (0, 1)) from the normal capsule.
pub fn reconstruct<T: Real>(digit_caps: &Tensor<T>, params: &NetworkParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let caps = g.param(digit_caps);
    let out = decode(&mut g, &vars, caps)?;
    Ok(g.value(out)?.clone())
}

/// Forward pass plus reconstruction for inference.
pub fn infer<T: Real>(image: &Tensor<T>, params: &NetworkParams<T>) -> Result<(CapsOutput<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.constant(image.clone());
    let trace = encode(&mut g, &vars, &params.scale, x)?;
    let recon = decode(&mut g, &vars, trace.routing.digit_caps)?;
    Ok((caps_output(&g, &trace)?, g.value(recon)?.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0f64, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);

        let unit = [0.6f64, 0.8];
        let s = squash(&unit);
        assert!((s[0] - 0.3).abs() < 1e-6 && (s[1] - 0.4).abs() < 1e-6);
        assert!((norm(&s) - 0.5).abs() < 1e-6);

        let big = [100.0f64, 0.0];
        assert!((norm(&squash(&big)) - 10000.0 / 10001.0).abs() < 1e-9);
        assert!((norm(&squash(&big)) - 0.99990).abs() < 1e-5);
    }

    #[test]
    fn single_iteration_couplings_are_uniform() {
        let p = Tensor::<f64>::from_fn(vec![4, 2, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let (v, c) = route(&p, 1).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.5));
        // v_j = squash(0.5 * Σ_i uhat_ij)
        for j in 0..2 {
            let s: Vec<f64> = (0..3)
                .map(|d| 0.5 * (0..4).map(|i| p.data()[(i * 2 + j) * 3 + d]).sum::<f64>())
                .collect();
            let want = squash(&s);
            for d in 0..3 {
                assert!((v.data()[j * 3 + d] - want[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_iterations_is_a_config_error() {
        let p = Tensor::<f64>::zeros(vec![2, 2, 3]).unwrap();
        assert!(matches!(route(&p, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_capsule_reconstructs_bias_image() {
        let params = NetworkParams::<f64>::init(ArchitectureScale::desk(), 1).unwrap();
        let zero = Tensor::zeros(vec![2, 16]).unwrap();
        let out = reconstruct(&zero, &params).unwrap();
        assert_eq!(out.shape(), &[IMAGE_PIXELS]);
        // zero biases everywhere: every pixel is sigmoid(0)
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let params = NetworkParams::<f32>::init(ArchitectureScale::desk(), 1).unwrap();
        let img = Tensor::zeros(vec![1, 27, 27]).unwrap();
        assert!(matches!(forward(&img, &params), Err(crate::Error::Config(_))));
    }
}
