//! Minibatch Adam training of the joint model with deterministic shuffling,
//! a hash-based held-out split, and a fixed chunked gradient-accumulation
//! order that serial and parallel evaluators both follow.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{
    discretize, encode, predict_action_bins, sample_loss, sample_loss_grad, LossWeights,
    ModelGrads, ModelParams,
};
use crate::nn::{AdamConfig, AdamState};
use crate::rng::{index_hash01, shuffle, stream, StreamKind};
use crate::sim::{render, ArenaParams, Interaction};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Forward-loss weight in the joint objective.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Optional hard cap on optimizer updates; the run stops mid-epoch when
    /// it is reached (the truncated epoch still reports stats).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            batch_size: 32,
            epochs: 8,
            learning_rate: 1e-4,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidParams(alloc::format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParams(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParams(alloc::format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == Some(0) {
            return Err(Error::InvalidParams("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_loc_acc: f64,
    pub heldout_angle_acc: f64,
    pub heldout_len_acc: f64,
}

/// Gradient accumulation granularity. Batches are split into chunks of this
/// many samples; each chunk sums into its own sink and the sinks reduce in
/// chunk order. Serial and parallel evaluators share these semantics, so
/// results are bitwise identical for any worker count.
pub const GRAD_CHUNK: usize = 8;

/// Summed gradients and loss of up to [`GRAD_CHUNK`] samples.
pub fn chunk_grads(
    chunk: &[Interaction],
    params: &ModelParams,
    arena: &ArenaParams,
    weights: &LossWeights,
) -> Result<(ModelGrads, f64)> {
    let mut sink = ModelGrads::zeros_like(params);
    let mut loss_sum = 0.0;
    for inter in chunk {
        loss_sum += sample_loss_grad(inter, params, arena, weights, &mut sink)?.total;
    }
    Ok((sink, loss_sum))
}

/// Reduces per-chunk results in order into one sink.
pub fn reduce_chunks(
    results: Vec<(ModelGrads, f64)>,
    params: &ModelParams,
) -> (ModelGrads, f64) {
    let mut total = ModelGrads::zeros_like(params);
    let mut loss = 0.0;
    for (g, l) in &results {
        total.add_from(g);
        loss += l;
    }
    (total, loss)
}

/// Computes summed batch gradients and loss. Implementations must follow
/// the [`GRAD_CHUNK`] fold semantics exactly.
pub trait BatchEvaluator {
    fn batch_grads(
        &self,
        batch: &[Interaction],
        params: &ModelParams,
        arena: &ArenaParams,
        weights: &LossWeights,
    ) -> Result<(ModelGrads, f64)>;
}

impl<T: BatchEvaluator + ?Sized> BatchEvaluator for &T {
    fn batch_grads(
        &self,
        batch: &[Interaction],
        params: &ModelParams,
        arena: &ArenaParams,
        weights: &LossWeights,
    ) -> Result<(ModelGrads, f64)> {
        (**self).batch_grads(batch, params, arena, weights)
    }
}

/// Single-threaded reference evaluator.
pub struct SerialEvaluator;

impl BatchEvaluator for SerialEvaluator {
    fn batch_grads(
        &self,
        batch: &[Interaction],
        params: &ModelParams,
        arena: &ArenaParams,
        weights: &LossWeights,
    ) -> Result<(ModelGrads, f64)> {
        let results = batch
            .chunks(GRAD_CHUNK)
            .map(|c| chunk_grads(c, params, arena, weights))
            .collect::<Result<Vec<_>>>()?;
        Ok(reduce_chunks(results, params))
    }
}

pub const HELDOUT_FRACTION: f64 = 0.1;
const HELDOUT_SALT: u64 = 0x4845_4C44;

/// Whether a dataset record belongs to the held-out split. Decided by a
/// hash of the record index, so the split is stable under dataset growth.
pub fn is_heldout(index: usize) -> bool {
    index_hash01(index as u64, HELDOUT_SALT) < HELDOUT_FRACTION
}

/// Deterministic (train, heldout) index partition.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::with_capacity(n);
    let mut held = Vec::with_capacity(n / 8);
    for i in 0..n {
        if is_heldout(i) {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeldoutStats {
    pub loss: f64,
    pub loc_acc: f64,
    pub angle_acc: f64,
    pub len_acc: f64,
}

/// Teacher-forced loss and greedy-chain accuracies over the held-out
/// records. All zeros if the split is empty.
pub fn evaluate_heldout(
    params: &ModelParams,
    arena: &ArenaParams,
    dataset: &[Interaction],
    heldout: &[usize],
    weights: &LossWeights,
) -> Result<HeldoutStats> {
    if heldout.is_empty() {
        return Ok(HeldoutStats::default());
    }
    let mut stats = HeldoutStats::default();
    for &i in heldout {
        let inter = &dataset[i];
        stats.loss += sample_loss(inter, params, arena, weights)?.total;
        let x_t = encode(&render(&inter.pose_t, arena), params)?;
        let x_t1 = encode(&render(&inter.pose_t1, arena), params)?;
        let predicted = predict_action_bins(&x_t, &x_t1, params)?;
        let target = discretize(&inter.poke, arena);
        if predicted.loc == target.loc {
            stats.loc_acc += 1.0;
        }
        if predicted.angle == target.angle {
            stats.angle_acc += 1.0;
        }
        if predicted.len == target.len {
            stats.len_acc += 1.0;
        }
    }
    let inv_n = 1.0 / heldout.len() as f64;
    stats.loss *= inv_n;
    stats.loc_acc *= inv_n;
    stats.angle_acc *= inv_n;
    stats.len_acc *= inv_n;
    Ok(stats)
}

/// Mean latent L2 norm of the pre-poke observations of `samples`; the
/// probe behind the latent-collapse property.
pub fn mean_latent_norm(
    params: &ModelParams,
    arena: &ArenaParams,
    samples: &[Interaction],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for inter in samples {
        total += encode(&render(&inter.pose_t, arena), params)?.l2_norm();
    }
    Ok(total / samples.len() as f64)
}

fn as_diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Full training loop under explicit loss weights. Parameters initialize
/// from the config seed; each epoch shuffles the training indices with its
/// own stream; gradients follow the chunked-fold order. Returns the final
/// parameters and one stats row per (possibly truncated) epoch.
pub fn train_with_weights(
    dataset: &[Interaction],
    arena: &ArenaParams,
    config: &TrainConfig,
    weights: LossWeights,
    evaluator: &impl BatchEvaluator,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParams, Vec<EpochStats>)> {
    config.validate()?;
    weights.validate()?;
    arena.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, held_idx) = split_indices(dataset.len());
    if train_idx.is_empty() {
        return Err(Error::InvalidParams(
            "no training samples left after the held-out split".into(),
        ));
    }

    let mut params = ModelParams::init(arena.arena_size, config.seed)?;
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(config.learning_rate),
        &params.layers(),
    );
    let mut log = Vec::with_capacity(config.epochs);
    let mut steps_left = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut rng = stream(config.seed, StreamKind::EpochShuffle, epoch as u64);
        shuffle(&mut rng, &mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut stopped = false;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<Interaction> = batch_idx.iter().map(|&i| dataset[i]).collect();
            let (grads, batch_loss) = evaluator
                .batch_grads(&batch, &params, arena, &weights)
                .map_err(|e| as_diverged(e, epoch))?;
            params.absorb_grads(&grads, 1.0 / batch.len() as f64);
            adam.step(&mut params.layers_mut())
                .map_err(|e| as_diverged(e, epoch))?;
            loss_sum += batch_loss;
            seen += batch.len();
            steps_left -= 1;
            if steps_left == 0 {
                stopped = true;
                break;
            }
        }

        let held = evaluate_heldout(&params, arena, dataset, &held_idx, &weights)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            heldout_loss: held.loss,
            heldout_loc_acc: held.loc_acc,
            heldout_angle_acc: held.angle_acc,
            heldout_len_acc: held.len_acc,
        };
        on_epoch(&stats);
        log.push(stats);
        if stopped {
            break 'epochs;
        }
    }
    Ok((params, log))
}

/// Training with the standard joint loss at the config's lambda.
pub fn train(
    dataset: &[Interaction],
    arena: &ArenaParams,
    config: &TrainConfig,
    evaluator: &impl BatchEvaluator,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParams, Vec<EpochStats>)> {
    train_with_weights(
        dataset,
        arena,
        config,
        LossWeights::joint(config.lambda),
        evaluator,
        on_epoch,
    )
}
