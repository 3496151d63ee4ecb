//! Local client learner: a tiny frozen-base classifier with adapter sites,
//! manual backpropagation, Adam and per-round learning-rate decay.

mod model;
mod optim;

pub use model::{evaluate, Activation, Batch, Cache, Grads, TinyModel, NUM_SITES, SITE_NAMES};
pub use optim::{adam_step, round_lr, Adam, BETA1, BETA2, EPSILON};

use crate::adapters::{AdapterConfig, Flavor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStats {
    /// Mean of the per-batch losses seen during training.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Sequential mini-batch Adam passes over `shard` in a seeded shuffled order.
/// Frozen sites are neither evaluated nor updated.
pub fn local_train(
    model: &mut TinyModel,
    opt: &mut Adam,
    shard: &Dataset,
    rng: &mut Rng,
    config: LocalTrainConfig,
    lr: f64,
) -> Result<TrainStats> {
    if shard.is_empty() {
        return Err(Error::contract("local shard is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut total = 0.0;
    let mut steps = 0;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch::from_dataset(shard, chunk);
            let (loss, cache) = model.forward_loss(&batch)?;
            let grads = model.backward(&cache)?;
            adam_step(opt, model.param_grad_pairs(&grads), lr);
            total += loss;
            steps += 1;
        }
    }
    Ok(TrainStats {
        mean_loss: if steps == 0 { 0.0 } else { total / steps as f64 },
        steps,
    })
}

/// Frozen base weights produced by central pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedBase {
    pub weights: Vec<Matrix>,
    /// Accuracy on the pretraining data just before freezing.
    pub accuracy: f64,
}

const PRETRAIN_BATCH: usize = 32;
const PRETRAIN_LR: f64 = 1e-2;

/// Trains all four base layers and a throwaway head centrally on `dataset`,
/// then returns the base weights. With `epochs == 0` the Gaussian
/// initialization (std `1/sqrt(d)`) is returned unchanged.
pub fn pretrain_base(rng: &mut Rng, dataset: &Dataset, epochs: usize) -> Result<PretrainedBase> {
    let d = dataset.dim();
    if d < 2 {
        return Err(Error::contract("pretraining needs d >= 2"));
    }
    let std = 1.0 / (d as f64).sqrt();
    let weights = (0..NUM_SITES)
        .map(|_| Matrix::gaussian(rng, d, d, std))
        .collect::<Result<Vec<_>>>()?;
    let mut model = TinyModel::new(
        &mut rng.fork_str("pretrain-adapters"),
        &weights,
        dataset.num_classes,
        &AdapterConfig::new(Flavor::TruncSvd, 1),
    )?;
    model.set_frozen(vec![true; NUM_SITES])?;
    let mut opt = Adam::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(PRETRAIN_BATCH) {
            let batch = Batch::from_dataset(dataset, chunk);
            let (_, cache) = model.forward_loss_impl(&batch, true)?;
            let grads = model.backward(&cache)?;
            let base_grads = grads.base.as_ref().expect("base gradients requested");
            let (head_w, head_b) = (grads.head_w.data(), grads.head_b.as_slice());
            let mut slots: Vec<(&mut [f64], Option<&[f64]>)> = Vec::with_capacity(NUM_SITES + 2);
            let (sites, (hw, hb)) = model.split_for_pretraining();
            for (site, g) in sites.iter_mut().zip(base_grads) {
                slots.push((site.base_mut().data_mut(), Some(g.data())));
            }
            slots.push((hw.data_mut(), Some(head_w)));
            slots.push((hb.as_mut_slice(), Some(head_b)));
            adam_step(&mut opt, slots, PRETRAIN_LR);
        }
    }
    let accuracy = evaluate(&model, dataset)?;
    Ok(PretrainedBase {
        weights: model.sites().iter().map(|s| s.base().clone()).collect(),
        accuracy,
    })
}
