//! Training steps, epochs and evaluation over in-memory samples.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugOp, Batch, Sample};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, DEFAULT_LAMBDA};
use crate::metrics::{argmax_labels, MetricReport};
use crate::network::Model;
use crate::optim::{adamw_step, OptimState};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub augment: Vec<AugOp>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            lambda: DEFAULT_LAMBDA,
            augment: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "lr and weight_decay must be >= 0, got {} and {}",
                self.lr,
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(alloc::format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(model: &Model, batch: &Batch, lambda: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let logits = model.net.forward(&mut tape, &p, x)?;
    let loss = combined_loss(&mut tape, logits, &batch.masks, lambda)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Training(alloc::format!("loss became {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut Model,
    state: &mut OptimState,
    batch: &Batch,
    lambda: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, lambda)?;
    adamw_step(&mut model.params, &grads, state)?;
    Ok(loss)
}

/// Runs epochs over a fixed training set with a seeded shuffle per epoch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: OptimState,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state =
            OptimState::new(&model.params, config.lr).with_weight_decay(config.weight_decay);
        Ok(Self {
            config,
            state,
            epoch: 0,
        })
    }

    /// One pass over `data`; returns the mean batch loss.
    pub fn run_epoch(&mut self, model: &mut Model, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let epoch_seed = self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let augmented;
        let data = if self.config.augment.is_empty() {
            data
        } else {
            augmented = augment(data, &self.config.augment, epoch_seed)?;
            &augmented[..]
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            total += train_step(model, &mut self.state, &batch, self.config.lambda)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }
}

/// Argmax predictions for every sample.
pub fn predict_masks(model: &Model, data: &[Sample]) -> Result<Vec<crate::tensor::LabelMap>> {
    data.iter()
        .map(|s| {
            let shape = s.image.shape();
            let img = s
                .image
                .clone()
                .reshape(&[1, shape[0], shape[1], shape[2]])?;
            let logits = model.predict(&img)?;
            let k = logits.shape()[1];
            argmax_labels(&logits.reshape(&[k, shape[1], shape[2]])?)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &[Sample], include_background: bool) -> Result<MetricReport> {
    let preds = predict_masks(model, data)?;
    let gts: Vec<_> = data.iter().map(|s| s.mask.clone()).collect();
    MetricReport::evaluate(&preds, &gts, model.config().num_classes, include_background)
}
