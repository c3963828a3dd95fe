//! Multi-head training loop with deterministic batching.
//!
//! Every epoch rebuilds the computation graph batch by batch: parameters are
//! attached as gradient-tracked leaves, the forward pass runs with fresh
//! dropout masks, and the optimizer consumes the gradients by name. All
//! randomness — shuffling and dropout — flows from one seeded stream, so a
//! seed fully determines the run.
//!
//! The global objective is `CE(main) + lambda * CE(aux)` where the auxiliary
//! term exists only for multi-head models. Model selection keeps the
//! parameters of the epoch with the strictly lowest validation loss, and
//! training stops early once `patience` epochs pass without improvement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::model::{DropoutMasks, ForwardOutput, Model, ModelError};
use crate::optim::{Algorithm, OptimConfig, Optimizer, OptimError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data: {0}")]
    InvalidData(String),

    #[error("hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Training hyperparameters with conventional defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Weight of the auxiliary head's loss term; ignored by single-head
    /// models.
    #[serde(default = "default_aux_weight")]
    pub aux_loss_weight: f64,
    #[serde(default)]
    pub algorithm: Algorithm,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_aux_weight() -> f64 {
    0.5
}

impl Default for HyperParams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidHyperParams(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} invalid", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} invalid", self.weight_decay));
        }
        if !(self.aux_loss_weight.is_finite() && self.aux_loss_weight >= 0.0) {
            return bad(format!("aux loss weight {} invalid", self.aux_loss_weight));
        }
        Ok(())
    }

    fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            algorithm: self.algorithm,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }
}

/// A batch-able supervised set: `x` is `(n, channels, timesteps)`.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self, TrainError> {
        if x.shape().len() != 3 {
            return Err(TrainError::InvalidData(format!(
                "expected (n, channels, timesteps), got {:?}",
                x.shape()
            )));
        }
        if x.shape()[0] != labels.len() {
            return Err(TrainError::InvalidData(format!(
                "{} samples but {} labels",
                x.shape()[0],
                labels.len()
            )));
        }
        Ok(LabeledSet { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate_for(&self, model: &Model, role: &str) -> Result<(), TrainError> {
        let cfg = model.config();
        if self.is_empty() {
            return Err(TrainError::InvalidData(format!("{role} set is empty")));
        }
        let shape = self.x.shape();
        if shape[1] != cfg.num_channels || shape[2] != cfg.num_timesteps {
            return Err(TrainError::InvalidData(format!(
                "{role} set is {:?} but the model expects {} channels x {} timesteps",
                shape, cfg.num_channels, cfg.num_timesteps
            )));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(TrainError::InvalidData(format!(
                "{role} set contains label {label} but the model has {} classes",
                cfg.num_classes
            )));
        }
        Ok(())
    }

    /// Copies the rows selected by `indices` into a contiguous batch tensor.
    fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.x.shape();
        let row = shape[1] * shape[2];
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(data, &[indices.len(), shape[1], shape[2]]).expect("batch shape");
        (t, labels)
    }
}

/// Graph nodes of the decomposed objective.
pub struct LossParts {
    pub total: NodeId,
    pub main: NodeId,
    pub aux: Option<NodeId>,
}

/// Builds `CE(main) + lambda * CE(aux)` on the graph. When the model has no
/// auxiliary head, or `lambda` is zero, the total IS the main term.
pub fn classification_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    labels: &[usize],
    lambda: f64,
) -> Result<LossParts, TensorError> {
    let main = g.nll_from_probs(out.main_probs, labels)?;
    match out.aux_probs {
        Some(aux_probs) if lambda > 0.0 => {
            let aux = g.nll_from_probs(aux_probs, labels)?;
            let weight = g.leaf(Tensor::scalar(lambda));
            let scaled = g.mul(weight, aux)?;
            let total = g.add(main, scaled)?;
            Ok(LossParts {
                total,
                main,
                aux: Some(aux),
            })
        }
        _ => Ok(LossParts {
            total: main,
            main,
            aux: None,
        }),
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    /// The model holding the best-validation-loss parameters.
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// State of the random stream when training finished, for checkpoints.
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

/// Index of the row maximum; ties resolve to the lower index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Non-training forward pass outputs over a whole set, batched.
pub struct PredictOutput {
    /// `n * classes` main-head probabilities, row-major.
    pub main_probs: Vec<f64>,
    /// `n * classes` auxiliary-head probabilities when the head exists.
    pub aux_probs: Option<Vec<f64>>,
    /// `n * channels` attention gates when attention is on.
    pub alphas: Option<Vec<f64>>,
}

/// Runs the model over `set` without dropout, collecting probabilities and
/// attention gates.
pub fn predict(model: &Model, set: &LabeledSet, batch_size: usize) -> Result<PredictOutput, TrainError> {
    set.validate_for(model, "prediction")?;
    if batch_size == 0 {
        return Err(TrainError::InvalidHyperParams(
            "batch size must be positive".into(),
        ));
    }
    let n = set.len();
    let mut main_probs = Vec::with_capacity(n * model.config().num_classes);
    let mut aux_probs: Option<Vec<f64>> = None;
    let mut alphas: Option<Vec<f64>> = None;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (bx, _) = set.gather(chunk);
        let mut g = Graph::new();
        let nodes = model.attach(&mut g);
        let x = g.leaf(bx);
        let out = model.forward(&mut g, &nodes, x, None)?;
        main_probs.extend_from_slice(g.value(out.main_probs).data());
        if let Some(id) = out.aux_probs {
            aux_probs
                .get_or_insert_with(Vec::new)
                .extend_from_slice(g.value(id).data());
        }
        if let Some(id) = out.alphas {
            alphas
                .get_or_insert_with(Vec::new)
                .extend_from_slice(g.value(id).data());
        }
    }
    Ok(PredictOutput {
        main_probs,
        aux_probs,
        alphas,
    })
}

/// Loss and main-head accuracy over a set, without dropout.
fn assess(
    model: &Model,
    set: &LabeledSet,
    lambda: f64,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let n = set.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let classes = model.config().num_classes;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (bx, blabels) = set.gather(chunk);
        let mut g = Graph::new();
        let nodes = model.attach(&mut g);
        let x = g.leaf(bx);
        let out = model.forward(&mut g, &nodes, x, None)?;
        let loss = classification_loss(&mut g, &out, &blabels, lambda)?;
        loss_sum += g.value(loss.total).data()[0] * chunk.len() as f64;
        let probs = g.value(out.main_probs).data();
        for (row, &label) in blabels.iter().enumerate() {
            if argmax_row(&probs[row * classes..(row + 1) * classes]) == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Trains `model` and returns the best-validation snapshot with history.
pub fn train(
    model: Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    hp: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(model, train_set, val_set, hp, seed, None)
}

/// [`train`] with an observer invoked after every completed epoch.
pub fn train_with_progress(
    mut model: Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    hp: &HyperParams,
    seed: u64,
    mut progress: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<TrainOutcome, TrainError> {
    hp.validate()?;
    train_set.validate_for(&model, "training")?;
    val_set.validate_for(&model, "validation")?;

    let lambda = match model.config().attention_mode {
        crate::model::AttentionMode::Multi => hp.aux_loss_weight,
        _ => 0.0,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut optimizer = Optimizer::new(hp.optim_config());

    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_params = model.params().clone();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut stopped_early = false;
    let mut history = Vec::new();

    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let (bx, blabels) = train_set.gather(chunk);
            let mut g = Graph::new();
            let nodes = model.attach(&mut g);
            let x = g.leaf(bx);
            let mut masks = DropoutMasks {
                rate: model.config().dropout_rate,
                rng: &mut rng,
            };
            let dropout = (model.config().dropout_rate > 0.0).then_some(&mut masks);
            let out = model.forward(&mut g, &nodes, x, dropout)?;
            if !g.value(out.main_probs).all_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    what: "main head produced non-finite probabilities".into(),
                });
            }
            if let Some(aux) = out.aux_probs {
                if !g.value(aux).all_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        what: "auxiliary head produced non-finite probabilities".into(),
                    });
                }
            }
            let loss = classification_loss(&mut g, &out, &blabels, lambda)?;
            let loss_value = g.value(loss.total).data()[0];
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    what: format!("batch loss is {loss_value}"),
                });
            }
            train_loss_sum += loss_value * chunk.len() as f64;

            g.backward(loss.total)?;
            let grads: BTreeMap<String, Vec<f64>> = nodes
                .iter()
                .map(|(name, &id)| {
                    let grad = g.grad(id).expect("parameters track gradients").to_vec();
                    (name.clone(), grad)
                })
                .collect();
            optimizer.step(model.params_mut(), &grads)?;
        }
        let train_loss = train_loss_sum / n as f64;

        let (val_loss, val_accuracy) = assess(&model, val_set, lambda, hp.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                what: format!("validation loss is {val_loss}"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if let Some(observer) = progress.as_mut() {
            observer(history.last().expect("pushed this epoch"));
        }

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_params = model.params().clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= hp.patience {
                stopped_early = true;
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    })
}

/// Renders the history as CSV with a fixed header.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        ));
    }
    out
}
