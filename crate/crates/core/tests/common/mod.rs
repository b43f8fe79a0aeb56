//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use capsad_core::capsnet::{self, ArchitectureScale, NetworkParams};
use capsad_core::numerics::{Graph, Tensor, Var};
use capsad_core::training::{sample_gradients, sample_loss, Example, LossConfig};
use capsad_core::{Label, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod suites;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ReLU inputs.
pub fn off_zero_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-3)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Max relative error between reverse-mode gradients of every input and
/// central differences of `loss = Σ build(inputs) ⊙ R` for a fixed random `R`.
pub fn primitive_grad_error(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut r = rng(seed ^ 0xabc);
    let eval = |xs: &[Tensor<f64>], want_grads: bool, r_weights: &Option<Tensor<f64>>| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| if want_grads { g.variable(x.clone()) } else { g.constant(x.clone()) }).collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.value(out).unwrap().shape().to_vec();
        let weights = r_weights.clone().unwrap_or_else(|| Tensor::new(shape.clone(), vec![1.0; shape.iter().product()]).unwrap());
        let w = g.constant(weights);
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).unwrap().item();
        let grads = if want_grads {
            g.backward(loss).unwrap();
            vars.iter().map(|&v| g.grad(v).unwrap().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).unwrap().len()])).collect()
        } else {
            Vec::new()
        };
        (value, grads, shape)
    };
    let (_, _, out_shape) = eval(inputs, false, &None);
    let weights = Some(random_tensor(&out_shape, -1.0, 1.0, &mut r));
    let (_, grads, _) = eval(inputs, true, &weights);
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false, &weights).0 - eval(&minus, false, &weights).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k][j], numeric));
        }
    }
    worst
}

pub fn reduced_scale() -> ArchitectureScale {
    ArchitectureScale {
        conv_channels: 3,
        primary_capsule_channels: 2,
        primary_capsule_dim: 4,
        digit_capsule_dim: 4,
        routing_iterations: 3,
        decoder_hidden: [6, 8],
    }
}

pub fn random_example(label: Label, rng: &mut ChaCha8Rng) -> Example<f64> {
    let target: Vec<f64> = (0..784).map(|_| rng.gen_range(0.0..1.0)).collect();
    let input = Tensor::new(vec![1, 28, 28], target.iter().map(|&x| (x - 0.1307) / 0.3081).collect()).unwrap();
    Example::new(input, target, label).unwrap()
}

/// Signs of every ReLU input in the network: conv1 and both hidden decoder
/// layers. A central difference is only valid when this pattern is the same
/// at `x - h`, `x` and `x + h`.
pub fn relu_pattern(params: &NetworkParams<f64>, ex: &Example<f64>) -> Vec<bool> {
    let mut g = Graph::<f64>::new();
    let vars = params.register(&mut g);
    let x = g.constant(ex.input.clone());
    let (w1, b1) = vars.conv1();
    let pre = g.conv2d(x, w1, b1, 1).unwrap();
    let mut signs: Vec<bool> = g.value(pre).unwrap().data().iter().map(|&v| v > 0.0).collect();
    let trace = capsnet::encode(&mut g, &vars, &params.scale, x).unwrap();
    let dim = params.scale.digit_capsule_dim;
    let mut h = g.slice(trace.routing.digit_caps, 0, &[dim]).unwrap();
    for layer in 0..2 {
        let (w, b) = vars.decoder(layer);
        let pre = g.dense(h, w, b).unwrap();
        signs.extend(g.value(pre).unwrap().data().iter().map(|&v| v > 0.0));
        h = g.relu(pre).unwrap();
    }
    signs
}

pub struct ComposedCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Central-difference check of the full per-sample loss (margin plus masked
/// reconstruction) with respect to `per_tensor` random coordinates of every
/// parameter tensor.
pub fn composed_grad_check(params: &NetworkParams<f64>, ex: &Example<f64>, per_tensor: usize, seed: u64) -> ComposedCheck {
    let cfg = LossConfig::default();
    let (_, grads) = sample_gradients(params, ex, &cfg).unwrap();
    let base_pattern = relu_pattern(params, ex);
    let mut r = rng(seed);
    let mut out = ComposedCheck { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    let n_tensors = params.tensors().len();
    for k in 0..n_tensors {
        let len = params.tensors()[k].len();
        for _ in 0..per_tensor.min(len) {
            let j = r.gen_range(0..len);
            let perturbed = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[k].data_mut()[j] += delta;
                p
            };
            let (plus, minus) = (perturbed(FD_STEP), perturbed(-FD_STEP));
            if relu_pattern(&plus, ex) != base_pattern || relu_pattern(&minus, ex) != base_pattern {
                out.skipped_kinks += 1;
                continue;
            }
            let numeric = (sample_loss(&plus, ex, &cfg).unwrap().total - sample_loss(&minus, ex, &cfg).unwrap().total)
                / (2.0 * FD_STEP);
            let analytic = grads[k].as_ref().map_or(0.0, |g| g[j]);
            out.max_rel_err = out.max_rel_err.max(rel_err(analytic, numeric));
            out.checked += 1;
        }
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squash written out directly: `v · |v|² / ((1 + |v|²) |v|)`.
pub fn squash_oracle(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    let k = n * n / (1.0 + n * n) / n;
    v.iter().map(|x| x * k).collect()
}

/// Routing by agreement as a plain loop over `uhat[i][j][d]`.
/// Returns the output capsules and the couplings used in every iteration.
pub fn routing_oracle(uhat: &[Vec<Vec<f64>>], iterations: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = uhat.len();
    let outputs = uhat[0].len();
    let dim = uhat[0][0].len();
    let mut logits = vec![vec![0.0; outputs]; n];
    let mut history = Vec::new();
    let mut v = vec![vec![0.0; dim]; outputs];
    for it in 0..iterations {
        let c: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|b| (b - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        for j in 0..outputs {
            let mut s = vec![0.0; dim];
            for i in 0..n {
                for d in 0..dim {
                    s[d] += c[i][j] * uhat[i][j][d];
                }
            }
            v[j] = squash_oracle(&s);
        }
        history.push(c);
        if it + 1 < iterations {
            for i in 0..n {
                for j in 0..outputs {
                    logits[i][j] += (0..dim).map(|d| uhat[i][j][d] * v[j][d]).sum::<f64>();
                }
            }
        }
    }
    (v, history)
}

/// Direct valid convolution, one output at a time.
pub fn conv_oracle(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[f64],
    (c_out, k): (usize, usize),
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iv = input[c * h * w + (y * stride + ky) * w + x * stride + kx];
                            acc += iv * kernels[((o * c_in + c) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// `P(anomaly score > normal score)`, ties ½, by explicit pair counting.
pub fn concordance_oracle(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if li.is_anomaly() && !lj.is_anomaly() {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Root holding `mnist/`: `$CAPSAD_DATA` when set, else the workspace `data/`.
pub fn data_root() -> PathBuf {
    std::env::var_os("CAPSAD_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// Max relative gradient error of every graph primitive on small random inputs.
pub fn primitive_grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>| {
        out.push((name, primitive_grad_error(&inputs, seed, build)));
    };
    let a = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
    let b = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
    case("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    case("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]));
    case("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]));
    case("scale", vec![a.clone()], &|g, v| g.scale(v[0], -1.7));
    case("add_scalar", vec![a.clone()], &|g, v| g.add_scalar(v[0], 0.3));
    case("square", vec![a.clone()], &|g, v| g.square(v[0]));
    case("relu", vec![off_zero_tensor(&[3, 4], &mut r)], &|g, v| g.relu(v[0]));
    case("sigmoid", vec![random_tensor(&[3, 4], -3.0, 3.0, &mut r)], &|g, v| g.sigmoid(v[0]));
    case("sum", vec![a.clone()], &|g, v| g.sum(v[0]));
    case("mean", vec![a.clone()], &|g, v| g.mean(v[0]));
    let s3 = random_tensor(&[2, 3, 4], -2.0, 2.0, &mut r);
    for (name, axis) in [("softmax axis 0", 0usize), ("softmax axis 1", 1), ("softmax axis 2", 2)] {
        case(name, vec![s3.clone()], &move |g, v| g.softmax(v[0], axis));
    }
    let img = random_tensor(&[2, 7, 7], -1.0, 1.0, &mut r);
    let ker = random_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let bias = random_tensor(&[3], -0.5, 0.5, &mut r);
    case("conv2d stride 1", vec![img.clone(), ker.clone(), bias.clone()], &|g, v| g.conv2d(v[0], v[1], v[2], 1));
    case("conv2d stride 2", vec![img, ker, bias], &|g, v| g.conv2d(v[0], v[1], v[2], 2));
    let x = random_tensor(&[5], -1.0, 1.0, &mut r);
    let w = random_tensor(&[4, 5], -1.0, 1.0, &mut r);
    let bb = random_tensor(&[4], -1.0, 1.0, &mut r);
    case("dense", vec![x, w, bb], &|g, v| g.dense(v[0], v[1], v[2]));
    case("reshape", vec![s3.clone()], &|g, v| g.reshape(v[0], &[6, 4]));
    case("slice", vec![s3.clone()], &|g, v| g.slice(v[0], 5, &[2, 5]));
    case("transpose_groups", vec![s3.clone()], &|g, v| g.transpose_groups(v[0]));
    case("squash", vec![random_tensor(&[4, 5], -1.5, 1.5, &mut r)], &|g, v| g.squash(v[0], 1e-8));
    case("row_norm", vec![random_tensor(&[4, 5], -1.5, 1.5, &mut r)], &|g, v| g.row_norm(v[0]));
    let u = random_tensor(&[3, 4], -1.0, 1.0, &mut r);
    let wc = random_tensor(&[3, 2, 5, 4], -1.0, 1.0, &mut r);
    case("caps_predict", vec![u, wc], &|g, v| g.caps_predict(v[0], v[1]));
    let c = random_tensor(&[3, 2], 0.0, 1.0, &mut r);
    let uhat = random_tensor(&[3, 2, 5], -1.0, 1.0, &mut r);
    case("weighted_sum", vec![c, uhat.clone()], &|g, v| g.weighted_sum(v[0], v[1]));
    let vv = random_tensor(&[2, 5], -1.0, 1.0, &mut r);
    case("agreement", vec![uhat, vv], &|g, v| g.agreement(v[0], v[1]));
    let cfg = LossConfig::default();
    for label in [Label::Normal, Label::Anomaly] {
        // lengths away from the margins, where the hinge is smooth
        let z = Tensor::vector(vec![r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)]).unwrap();
        let name = if label == Label::Normal { "margin loss (normal)" } else { "margin loss (anomaly)" };
        case(name, vec![z], &move |g, v| capsad_core::training::margin_loss_graph(g, v[0], label, &cfg));
    }
    let preds = random_tensor(&[5, 2, 4], -1.0, 1.0, &mut r);
    case("routing (3 iterations)", vec![preds], &|g, v| {
        capsnet::routing_by_agreement(g, v[0], 3).map(|routing| routing.digit_caps)
    });
    out
}
