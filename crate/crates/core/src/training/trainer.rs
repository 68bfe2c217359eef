use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::SyntheticSample;
use crate::error::{MctError, Result};
use crate::model::{decays, forward_graph, load_params, patchify, ModelConfig, ModelParameters};
use crate::parallel::Execution;
use crate::training::loss::{loss_graph, LossParts};
use crate::training::optim::{cosine_lr, AdamWConfig, OptimizerState};

/// Optimization hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub execution: Execution,
}

impl Default for RunParams {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            seed: 0,
            epochs: 40,
            batch_size: 16,
            lr: adam.lr,
            min_lr: 1e-6,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            execution: Execution::Parallel,
        }
    }
}

impl RunParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MctError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(MctError::Config("lr, min_lr and weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Learning rate at `step` of `total`; the floor never exceeds the base rate.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        cosine_lr(self.lr, self.min_lr.min(self.lr), step, total)
    }
}

/// Batch-mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossParts,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub trace: Vec<StepLoss>,
}

/// Independent 64-bit seed for a named sub-stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Loss and parameter gradients for a single sample.
pub fn sample_gradients(
    params: &ModelParameters,
    config: &ModelConfig,
    sample: &SyntheticSample,
) -> Result<(LossParts, Vec<Tensor>)> {
    let mut g = Graph::new();
    let patches = g.constant(patchify(&sample.image, config)?);
    let p = load_params(&mut g, params, true);
    let vars = forward_graph(&mut g, &p, config, patches)?;
    let (total, cls, patch) = loss_graph(&mut g, &vars, &sample.labels, config.variant)?;
    let mut grads = g.backward(total)?;
    let parts = LossParts {
        cls: g.value(cls).data()[0],
        patch: patch.map_or(0.0, |v| g.value(v).data()[0]),
        total: g.value(total).data()[0],
    };
    let out = p.named().into_iter().map(|(_, &v)| grads.take(v, &g)).collect();
    Ok((parts, out))
}

/// Mean loss and mean gradients over a batch. Per-sample work may run in
/// parallel; the reduction is always in batch order.
pub fn batch_gradients(
    params: &ModelParameters,
    config: &ModelConfig,
    batch: &[&SyntheticSample],
    exec: Execution,
) -> Result<(LossParts, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(MctError::Empty("batch"));
    }
    let per_sample = exec.map(batch, |s| sample_gradients(params, config, s));
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty batch")?;
    for r in iter {
        let (l, g) = r?;
        loss.cls += l.cls;
        loss.patch += l.patch;
        loss.total += l.total;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss.cls *= inv;
    loss.patch *= inv;
    loss.total *= inv;
    for g in &mut grads {
        g.scale_in_place(inv);
    }
    Ok((loss, grads))
}

/// Trains from a fresh initialization derived from `run.seed`.
pub fn train(dataset: &[SyntheticSample], config: &ModelConfig, run: &RunParams) -> Result<TrainOutcome> {
    let params = ModelParameters::init(config, derive_seed(run.seed, INIT_STREAM))?;
    train_from(params, dataset, config, run, |_, _| {})
}

/// Mini-batch AdamW with cosine decay, starting from `params`.
/// `progress(epoch, mean_epoch_loss)` is called after every epoch.
pub fn train_from(
    mut params: ModelParameters,
    dataset: &[SyntheticSample],
    config: &ModelConfig,
    run: &RunParams,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    run.validate()?;
    params.check_layout(config)?;
    if dataset.is_empty() {
        return Err(MctError::Empty("training dataset"));
    }
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut state = OptimizerState::new(run.adamw(), shapes.iter().map(Vec::as_slice));

    let steps_per_epoch = dataset.len().div_ceil(run.batch_size);
    let total_steps = steps_per_epoch * run.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..run.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = batch_gradients(&params, config, &batch, run.execution)?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(MctError::Diverged { step, loss: loss.total });
            }
            let lr = run.lr_at(step, total_steps);
            state.step(&mut params.values_mut(), &grads, &decay, lr)?;
            trace.push(StepLoss { step, epoch, loss });
            epoch_loss += loss.total;
            step += 1;
        }
        progress(epoch, epoch_loss / steps_per_epoch as f64);
    }
    Ok(TrainOutcome { params, trace })
}

pub const LOSS_CSV_HEADER: &str = "step,loss_cls,loss_patch,total";

pub fn loss_trace_csv(trace: &[StepLoss]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for s in trace {
        writeln!(out, "{},{},{},{}", s.step, s.loss.cls, s.loss.patch, s.loss.total).expect("write to string");
    }
    out
}
