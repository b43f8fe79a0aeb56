//! Margin + masked reconstruction objective, Adam, and the epoch loop.

mod adam;

pub use adam::{OptimizerSettings, OptimizerState};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsnet::{self, ArchitectureScale, NetworkParams, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{config_err, usage_err, Error, Result};
use crate::numerics::{cst, Graph, Real, Tensor, Var};
use crate::Label;

/// Constants of the margin loss and the weight of the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
    /// Multiplies the summed squared reconstruction error (= 784 · r_l).
    pub recon_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { m_plus: 0.9, m_minus: 0.1, lambda_down: 0.5, recon_weight: 0.0005 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(config_err!("margins must satisfy 0 < m_minus < m_plus < 1"));
        }
        if !(self.lambda_down > 0.0) {
            return Err(config_err!("lambda_down must be positive"));
        }
        if !(self.recon_weight >= 0.0) {
            return Err(config_err!("recon_weight must be non-negative"));
        }
        Ok(())
    }
}

/// `Σ_k T_k·max(0, m⁺ − z_k)² + λ·(1 − T_k)·max(0, z_k − m⁻)²` over the two
/// capsule lengths `z = (z_n, z_a)`.
pub fn margin_loss(z: [f64; 2], label: Label, cfg: &LossConfig) -> f64 {
    let truth = label.capsule_index();
    z.iter()
        .enumerate()
        .map(|(k, &zk)| {
            if k == truth {
                (cfg.m_plus - zk).max(0.0).powi(2)
            } else {
                cfg.lambda_down * (zk - cfg.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

/// Mean squared error between a `[0, 1]` target image and a reconstruction.
pub fn reconstruction_loss<T: Real>(target: &[T], recon: &[T]) -> Result<f64> {
    if target.len() != recon.len() || target.is_empty() {
        return Err(usage_err!("reconstruction sizes differ: {} vs {}", target.len(), recon.len()));
    }
    let sse: f64 = target
        .iter()
        .zip(recon)
        .map(|(&t, &r)| {
            let d = (r - t).to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sse / target.len() as f64)
}

/// Records the margin loss on capsule lengths `[2]`.
pub fn margin_loss_graph<T: Real>(g: &mut Graph<'_, T>, lengths: Var, label: Label, cfg: &LossConfig) -> Result<Var> {
    let mut present = [T::zero(); 2];
    present[label.capsule_index()] = T::one();
    let absent = present.map(|t| T::one() - t);
    let present = g.constant(Tensor::vector(present.to_vec())?);
    let absent = g.constant(Tensor::vector(absent.to_vec())?);

    let neg = g.scale(lengths, -1.0)?;
    let up = g.add_scalar(neg, cfg.m_plus)?;
    let up = g.relu(up)?;
    let up = g.square(up)?;
    let up = g.mul(present, up)?;
    let up = g.sum(up)?;

    let down = g.add_scalar(lengths, -cfg.m_minus)?;
    let down = g.relu(down)?;
    let down = g.square(down)?;
    let down = g.mul(absent, down)?;
    let down = g.sum(down)?;
    let down = g.scale(down, cfg.lambda_down)?;
    g.add(up, down)
}

/// One training image: the standardized network input, the `[0, 1]`
/// reconstruction target, and the binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T: Real = f32> {
    /// `[1, 28, 28]`
    pub input: Tensor<T>,
    /// 784 raw pixels rescaled to `[0, 1]`.
    pub target: Vec<T>,
    pub label: Label,
}

impl<T: Real> Example<T> {
    pub fn new(input: Tensor<T>, target: Vec<T>, label: Label) -> Result<Self> {
        if input.shape() != [1, IMAGE_SIDE, IMAGE_SIDE] || target.len() != IMAGE_PIXELS {
            return Err(config_err!("example must be a [1,28,28] input with a 784-pixel target"));
        }
        Ok(Self { input, target, label })
    }

    pub fn cast<U: Real>(&self) -> Example<U> {
        Example {
            input: self.input.cast(),
            target: self.target.iter().map(|&v| cst::<U>(v.to_f64().unwrap())).collect(),
            label: self.label,
        }
    }
}

/// Loss components of one example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLoss {
    pub margin: f64,
    /// r_l for normal examples, `None` for anomalies (no reconstruction term).
    pub recon: Option<f64>,
    pub total: f64,
}

struct SampleGraph<'a, T: Real> {
    graph: Graph<'a, T>,
    params: crate::capsnet::ParamVars,
    total: Var,
    loss: SampleLoss,
}

fn build_sample<'a, T: Real>(params: &'a NetworkParams<T>, ex: &'a Example<T>, cfg: &LossConfig) -> Result<SampleGraph<'a, T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.constant(ex.input.clone());
    let trace = capsnet::encode(&mut g, &vars, &params.scale, x)?;
    let margin = margin_loss_graph(&mut g, trace.lengths, ex.label, cfg)?;
    let (total, recon) = match ex.label {
        Label::Normal => {
            let recon = capsnet::decode(&mut g, &vars, trace.routing.digit_caps)?;
            let target = g.constant(Tensor::vector(ex.target.clone())?);
            let diff = g.sub(recon, target)?;
            let sq = g.square(diff)?;
            let r_l = g.mean(sq)?;
            let term = g.scale(r_l, cfg.recon_weight * IMAGE_PIXELS as f64)?;
            (g.add(margin, term)?, Some(r_l))
        }
        // anomalies never reach the decoder
        Label::Anomaly => (margin, None),
    };
    let scalar = |v: Var| -> Result<f64> { Ok(g.value(v)?.item().to_f64().unwrap()) };
    let loss = SampleLoss { margin: scalar(margin)?, recon: recon.map(&scalar).transpose()?, total: scalar(total)? };
    Ok(SampleGraph { graph: g, params: vars, total, loss })
}

/// Objective of a single example (forward only).
pub fn sample_loss<T: Real>(params: &NetworkParams<T>, ex: &Example<T>, cfg: &LossConfig) -> Result<SampleLoss> {
    Ok(build_sample(params, ex, cfg)?.loss)
}

/// Objective of a single example and its gradient for every parameter
/// tensor (`None` where the example does not reach the tensor).
pub fn sample_gradients<T: Real>(
    params: &NetworkParams<T>,
    ex: &Example<T>,
    cfg: &LossConfig,
) -> Result<(SampleLoss, Vec<Option<Vec<T>>>)> {
    let mut s = build_sample(params, ex, cfg)?;
    s.graph.backward(s.total)?;
    let grads = s
        .params
        .all
        .iter()
        .map(|&v| s.graph.grad(v).map(|g| g.map(<[T]>::to_vec)))
        .collect::<Result<Vec<_>>>()?;
    Ok((s.loss, grads))
}

/// Mean loss components over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub margin: f64,
    /// Mean r_l over the normal examples of the batch (0 when there are none).
    pub recon: f64,
    pub total: f64,
    pub normal_count: usize,
    pub size: usize,
}

/// Accumulates the batch-mean gradient into each parameter's gradient slot
/// (after clearing it) and returns the mean losses. Per-example gradients
/// are computed in parallel and summed in example order, so the result does
/// not depend on the thread count.
pub fn accumulate_batch_gradients<T: Real>(
    batch: &[&Example<T>],
    params: &mut NetworkParams<T>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(usage_err!("training step on an empty batch"));
    }
    let mut sums: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut loss = BatchLoss { size: batch.len(), ..Default::default() };
    let chunk = rayon::current_num_threads().max(1);
    for group in batch.chunks(chunk) {
        let frozen = &*params;
        let results: Vec<_> = group
            .par_iter()
            .map(|ex| sample_gradients(frozen, ex, cfg))
            .collect::<Result<Vec<_>>>()?;
        for (sample, grads) in results {
            loss.margin += sample.margin;
            loss.total += sample.total;
            if let Some(r) = sample.recon {
                loss.recon += r;
                loss.normal_count += 1;
            }
            for (acc, g) in sums.iter_mut().zip(grads) {
                if let Some(g) = g {
                    crate::numerics::kernels::add_into(acc, &g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    loss.margin /= n;
    loss.total /= n;
    if loss.normal_count > 0 {
        loss.recon /= loss.normal_count as f64;
    }
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {}", loss.total)));
    }
    let inv = cst::<T>(1.0 / n);
    for (t, mut acc) in params.tensors_mut().into_iter().zip(sums) {
        acc.iter_mut().for_each(|v| *v = *v * inv);
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for tensor {:?}", t.shape())));
        }
        t.zero_grad();
        t.accumulate_grad(&acc)?;
    }
    Ok(loss)
}

/// One optimization step on `batch`.
pub fn training_step<T: Real>(
    batch: &[&Example<T>],
    params: &mut NetworkParams<T>,
    opt: &mut OptimizerState<T>,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let loss = accumulate_batch_gradients(batch, params, cfg)?;
    opt.update(&mut params.tensors_mut())?;
    params.step += 1;
    params.zero_grad();
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scale: ArchitectureScale,
    pub seed: u64,
    pub epochs: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerSettings,
}

/// Per-epoch means over all examples of the epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub margin_loss: f64,
    /// Mean r_l over normal examples.
    pub recon_loss: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: f64,
    pub final_step: u64,
    pub seed: u64,
}

impl TrainReport {
    /// One JSON object per epoch, newline terminated.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad train report line: {e}"))))
            .collect()
    }
}

/// Seeded training from freshly initialized parameters.
pub fn train(examples: &[Example<f32>], config: &TrainConfig) -> Result<(NetworkParams<f32>, TrainReport)> {
    let params = NetworkParams::init(config.scale, config.seed)?;
    train_from(params, examples, config)
}

/// Continues training `params` for `config.epochs` epochs. Each epoch visits
/// the examples in a fresh uniform permutation; the last batch may be short.
pub fn train_from(
    mut params: NetworkParams<f32>,
    examples: &[Example<f32>],
    config: &TrainConfig,
) -> Result<(NetworkParams<f32>, TrainReport)> {
    config.loss.validate()?;
    config.optimizer.validate()?;
    let batch_size = config.optimizer.batch_size;
    if examples.len() < batch_size {
        return Err(usage_err!("dataset of {} examples is smaller than one batch of {batch_size}", examples.len()));
    }
    let start = Instant::now();
    let mut opt = OptimizerState::new(config.optimizer, &params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4553);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let (mut margin, mut total, mut recon, mut normals) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(batch_size) {
            let batch: Vec<&Example<f32>> = idx.iter().map(|&i| &examples[i]).collect();
            let loss = training_step(&batch, &mut params, &mut opt, &config.loss).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, step {}: {msg}", params.step + 1)),
                other => other,
            })?;
            margin += loss.margin * loss.size as f64;
            total += loss.total * loss.size as f64;
            recon += loss.recon * loss.normal_count as f64;
            normals += loss.normal_count;
        }
        let n = examples.len() as f64;
        let record = EpochRecord {
            epoch,
            margin_loss: margin / n,
            recon_loss: if normals > 0 { recon / normals as f64 } else { 0.0 },
            total: total / n,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: margin {:.5} recon {:.5} total {:.5} ({:.1}s)",
            config.epochs,
            record.margin_loss,
            record.recon_loss,
            record.total,
            record.seconds
        );
        records.push(record);
    }
    let report = TrainReport {
        epochs: records,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_step: params.step,
        seed: config.seed,
    };
    Ok((params, report))
}
