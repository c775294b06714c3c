//! Training engine: momentum SGD, the piecewise learning-rate schedule,
//! the epoch loop with per-epoch shuffling and validation, and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::make_batches;
use crate::error::{Error, Result};
use crate::layers::{xent_from_probs, Mode, Network};
use crate::rng::{streams, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_period_epochs: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            lr_drop_factor: 0.2,
            lr_drop_period_epochs: 5,
            max_epochs: 20,
            momentum: 0.9,
            batch_size: 32,
            seed: 42,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "initial learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "lr drop factor must be in (0,1], got {}",
                self.lr_drop_factor
            )));
        }
        if self.lr_drop_period_epochs == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam(
                "drop period, max epochs and batch size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// The piecewise schedule: the learning rate holds for `lr_drop_period_epochs`
/// epochs, then multiplies by the drop factor.
/// lr(epoch) = initial_lr · factor^floor((epoch−1)/period), epoch 1-based.
pub fn lr_for_epoch(cfg: &TrainingConfig, epoch: usize) -> Result<f64> {
    if epoch < 1 || epoch > cfg.max_epochs {
        return Err(Error::InvalidParam(format!(
            "epoch {epoch} outside 1..={}",
            cfg.max_epochs
        )));
    }
    let drops = (epoch - 1) / cfg.lr_drop_period_epochs;
    Ok(cfg.initial_lr * cfg.lr_drop_factor.powi(drops as i32))
}

/// Per-parameter velocity tensors for momentum SGD, zero-initialized.
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn for_network(net: &Network<T>) -> Self {
        let velocity = net
            .trainable_params()
            .into_iter()
            .map(|(name, t)| (name, Tensor::zeros(t.shape())))
            .collect();
        Self { velocity }
    }
}

/// One momentum-SGD update, velocity form:
/// v ← momentum·v − lr·g; w ← w + v.
/// Key sets of parameters, gradients and state must be identical.
pub fn sgdm_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer key sets differ: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = T::from_f64(lr);
    let momentum = T::from_f64(momentum);
    for (name, w) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no gradient for {name:?}")))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no velocity for {name:?}")))?;
        if g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "update shapes for {name:?}: w {:?}, g {:?}, v {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for i in 0..w.numel() {
            let vi = momentum * v.data()[i] - lr * g.data()[i];
            v.data_mut()[i] = vi;
            w.data_mut()[i] = w.data()[i] + vi;
        }
    }
    Ok(())
}

/// An in-memory labeled dataset: one C×H×W tensor and one class index per
/// sample. All samples share a shape.
#[derive(Clone, Default)]
pub struct LabeledSet {
    inputs: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input: Tensor<f32>, label: usize) -> Result<()> {
        if input.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "samples must be C×H×W, got {:?}",
                input.shape()
            )));
        }
        if let Some(first) = self.inputs.first() {
            if first.shape() != input.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "sample shape {:?} differs from the set's {:?}",
                    input.shape(),
                    first.shape()
                )));
            }
        }
        self.inputs.push(input);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn input(&self, i: usize) -> &Tensor<f32> {
        &self.inputs[i]
    }

    /// Stacks the given samples into one N×C×H×W batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shape = self.inputs[indices[0]].shape();
        let mut data = Vec::with_capacity(indices.len() * self.inputs[indices[0]].numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs[i].data());
            labels.push(self.labels[i]);
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        Ok((Tensor::new(&full, data)?, labels))
    }
}

/// One row of the per-epoch training log. `val_accuracy` is absent when no
/// validation samples were provided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Runs the full training loop; see [`train_with_callback`]. The callback-free
/// variant most callers want.
pub fn train(
    net: &mut Network<f32>,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainingConfig,
) -> Result<Vec<MetricsRecord>> {
    train_with_callback(net, train_set, val_set, cfg, |_, _| Ok(()))
}

/// The epoch loop. Per epoch: shuffle the training indices on the epoch's
/// own seed stream, iterate mini-batches (the final short batch is kept),
/// run forward/backward in training mode, apply momentum SGD with the
/// scheduled learning rate, then record metrics. `train_loss` is the
/// sample-weighted mean batch loss; `train_accuracy` is measured by a full
/// inference-mode pass after the epoch's updates, so it is comparable with
/// the validation number. The callback runs after each epoch's record is
/// final (checkpointing hooks use it). Bit-deterministic for a given
/// (seed, data).
pub fn train_with_callback(
    net: &mut Network<f32>,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainingConfig,
    mut after_epoch: impl FnMut(&Network<f32>, &MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = train_set.len();
    let mut state = OptimizerState::for_network(net);
    let mut records = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        let lr = lr_for_epoch(cfg, epoch)?;
        let order: Vec<usize> = if cfg.shuffle_each_epoch {
            Rng::with_stream(cfg.seed, streams::SHUFFLE_BASE + epoch as u64).shuffle(n)
        } else {
            (0..n).collect()
        };

        let mut weighted_loss = 0.0f64;
        for batch_indices in make_batches(&order, cfg.batch_size) {
            let (x, labels) = train_set.batch(&batch_indices)?;
            let probs = net.forward(&x, Mode::Training)?;
            let (loss, dlogits) = xent_from_probs(&probs, &labels)?;
            let grads = net.backward(&dlogits)?;
            sgdm_step(
                &mut net.trainable_params_mut(),
                &grads,
                &mut state,
                lr,
                cfg.momentum,
            )?;
            weighted_loss += loss as f64 * batch_indices.len() as f64;
        }

        let (train_accuracy, _) = evaluate(net, train_set)?;
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(net, val_set)?.0)
        };
        let record = MetricsRecord {
            epoch,
            lr,
            train_loss: weighted_loss / n as f64,
            train_accuracy,
            val_accuracy,
        };
        after_epoch(net, &record)?;
        records.push(record);
    }
    Ok(records)
}

/// Inference-mode accuracy and the 2×2 confusion matrix
/// (`confusion[true][predicted]`). Prediction is the argmax of the class
/// probabilities; ties resolve to the lower class index.
pub fn evaluate(net: &mut Network<f32>, set: &LabeledSet) -> Result<(f64, [[usize; 2]; 2])> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confusion = [[0usize; 2]; 2];
    let mut correct = 0usize;
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(32) {
        let (x, labels) = set.batch(chunk)?;
        let probs = net.forward(&x, Mode::Inference)?;
        let c = probs.shape()[1];
        if c != 2 {
            return Err(Error::InvalidParam(format!(
                "evaluation expects a 2-class network, got {c} classes"
            )));
        }
        for (b, &label) in labels.iter().enumerate() {
            if label >= 2 {
                return Err(Error::BadLabel(label));
            }
            let row = &probs.data()[b * c..(b + 1) * c];
            let pred = if row[1] > row[0] { 1 } else { 0 };
            confusion[label][pred] += 1;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / set.len() as f64, confusion))
}
