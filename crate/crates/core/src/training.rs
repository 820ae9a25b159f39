//! Next-step-prediction training with validation MASE and checkpoint hooks.

use crate::container::{Container, ContainerError};
use crate::dynamics::{Split, TrajectoryDataset};
use crate::models::{build_forward, model_forward, ModelError, ModelParams, ModelSpec};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, NumericsError, Tensor, Var};
use crate::seed;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("MASE undefined: persistence error is zero")]
    ZeroDenominator,
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Option<Box<TrainState>>,
        records: Vec<CheckpointRecord>,
    },
    #[error("invalid train config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("dataset has an empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("hook failed: {0}")]
    Hook(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 3e-4,
            batch_size: 64,
            seed: 0,
            checkpoint_every: 50,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, message: String| Err(TrainError::InvalidConfig { field, message });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm", format!("must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub validation_mase: f64,
    pub train_loss: f64,
    pub snapshot: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_mase: f64,
}

/// Everything needed to resume a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, learning_rate: f64, seed: u64) -> Self {
        let adam = AdamState::new(AdamConfig::with_learning_rate(learning_rate), &params.tensors);
        Self { params, adam, epoch: 0, seed }
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": self.params.spec.kind,
            "d": self.params.spec.d,
            "model": self.params.spec,
            "seed": self.seed,
            "epoch": self.epoch,
            "adam": self.adam.config,
            "adam_step": self.adam.step,
        });
        let mut c = Container::new("checkpoint", meta);
        let names = self.params.names();
        for (prefix, tensors) in [
            ("param", &self.params.tensors),
            ("adam_m", &self.adam.first_moment),
            ("adam_v", &self.adam.second_moment),
        ] {
            for (name, t) in names.iter().zip(tensors.iter()) {
                c.push(format!("{prefix}.{name}"), t.shape().to_vec(), t.data().to_vec());
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, TrainError> {
        if c.kind != "checkpoint" {
            return Err(TrainError::Checkpoint(format!("expected checkpoint, got {}", c.kind)));
        }
        let get = |k: &str| {
            c.meta.get(k).cloned().ok_or_else(|| TrainError::Checkpoint(format!("missing {k}")))
        };
        let de = |k: &str| -> Result<serde_json::Value, TrainError> { get(k) };
        let spec: ModelSpec = serde_json::from_value(de("model")?)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let adam_cfg: AdamConfig = serde_json::from_value(de("adam")?)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let num = |k: &str| -> Result<u64, TrainError> {
            de(k)?.as_u64().ok_or_else(|| TrainError::Checkpoint(format!("{k} not an integer")))
        };
        let names: Vec<&str> = spec.layout().into_iter().map(|(n, _)| n).collect();
        let load = |prefix: &str| -> Result<Vec<Tensor>, TrainError> {
            names
                .iter()
                .map(|n| {
                    let a = c.array(&format!("{prefix}.{n}"))?;
                    Ok(Tensor::new(a.shape.clone(), a.data.clone())?)
                })
                .collect()
        };
        let params = ModelParams::from_tensors(spec, load("param")?)?;
        let adam = AdamState {
            config: adam_cfg,
            first_moment: load("adam_m")?,
            second_moment: load("adam_v")?,
            step: num("adam_step")?,
        };
        Ok(Self { params, adam, epoch: num("epoch")? as usize, seed: num("seed")? })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<CheckpointRecord>,
    pub final_mase: f64,
    /// Final validation MASE below 1, i.e. the model carries predictive information.
    pub included: bool,
}

/// Callbacks invoked by [`train_with`].
pub trait TrainObserver {
    fn on_epoch(&mut self, _stats: &EpochStats) -> Result<(), String> {
        Ok(())
    }
    /// Called at each checkpoint epoch; may set `record.snapshot`.
    fn on_checkpoint(&mut self, _state: &TrainState, _record: &mut CheckpointRecord) -> Result<(), String> {
        Ok(())
    }
}

struct NoObserver;
impl TrainObserver for NoObserver {}

pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(TrainError::LengthMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let s: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / predictions.len() as f64)
}

/// Mean squared error node between a `[n, 1]` prediction node and targets.
pub fn mse_loss(g: &mut Graph, predictions: Var, targets: &[f64]) -> Result<Var, TrainError> {
    let n = g.value(predictions).len();
    if n != targets.len() {
        return Err(TrainError::LengthMismatch(format!("{n} predictions vs {} targets", targets.len())));
    }
    let t = g.constant(Tensor::column(targets.to_vec()));
    let diff = g.sub(predictions, t);
    let sq = g.mul(diff, diff);
    Ok(g.mean(sq))
}

/// Aggregate MASE: `Σ|target − pred| / Σ|target − previous|`.
pub fn mase(predictions: &[f64], targets: &[f64], previous: &[f64]) -> Result<f64, TrainError> {
    let mut acc = MaseAccumulator::default();
    acc.add(predictions, targets, previous)?;
    acc.value()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MaseAccumulator {
    model_error: f64,
    persistence_error: f64,
    count: usize,
}

impl MaseAccumulator {
    pub fn add(&mut self, predictions: &[f64], targets: &[f64], previous: &[f64]) -> Result<(), TrainError> {
        if predictions.len() != targets.len() || targets.len() != previous.len() {
            return Err(TrainError::LengthMismatch(format!(
                "{} / {} / {}",
                predictions.len(),
                targets.len(),
                previous.len()
            )));
        }
        for ((p, t), q) in predictions.iter().zip(targets).zip(previous) {
            self.model_error += (t - p).abs();
            self.persistence_error += (t - q).abs();
        }
        self.count += targets.len();
        Ok(())
    }

    pub fn value(&self) -> Result<f64, TrainError> {
        if self.count < 2 {
            return Err(TrainError::LengthMismatch(format!("{} positions, need >= 2", self.count)));
        }
        if self.persistence_error == 0.0 {
            return Err(TrainError::ZeroDenominator);
        }
        Ok(self.model_error / self.persistence_error)
    }
}

/// Prediction positions scored by [`evaluate`]: predictions made at series
/// index `p >= 1` for target index `p + 1 >= 2`.
pub const FIRST_EVAL_POSITION: usize = 1;

/// Add one series to a MASE accumulator given the model's predictions.
pub fn accumulate_series(
    acc: &mut MaseAccumulator,
    series: &[f64],
    predictions: &[f64],
    offset: usize,
) -> Result<(), TrainError> {
    let start = offset.max(FIRST_EVAL_POSITION);
    let end = series.len() - 1;
    if start >= end {
        return Ok(());
    }
    let preds = &predictions[start - offset..end - offset];
    acc.add(preds, &series[start + 1..=end], &series[start..end])
}

/// Validation (or train) MASE of a model.
pub fn evaluate(params: &ModelParams, data: &TrajectoryDataset, split: Split) -> Result<f64, TrainError> {
    let idx = data.split(split);
    let parts: Vec<_> = idx
        .par_iter()
        .map(|&i| {
            let series = data.model_input(i);
            let tr = model_forward(params, &series)?;
            let mut acc = MaseAccumulator::default();
            accumulate_series(&mut acc, &series, &tr.predictions, tr.offset)?;
            Ok::<_, TrainError>(acc)
        })
        .collect::<Result<_, _>>()?;
    let mut total = MaseAccumulator::default();
    for p in parts {
        total.model_error += p.model_error;
        total.persistence_error += p.persistence_error;
        total.count += p.count;
    }
    total.value()
}

/// Loss and parameter gradients for one series.
pub fn sequence_loss_and_grads(
    params: &ModelParams,
    series: &[f64],
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| g.param(t.clone())).collect();
    let fv = build_forward(&mut g, &params.spec, &vars, series)?;
    let offset = params.spec.first_position();
    let n = series.len() - 1 - offset;
    g.set_label("loss");
    let preds = g.slice_rows(fv.predictions, 0, n);
    let loss = mse_loss(&mut g, preds, &series[offset + 1..])?;
    let grads = g.backward(loss).map_err(|e| match e {
        NumericsError::NonFinite { node, label, .. } => {
            TrainError::Model(ModelError::NonFinite { layer: label, node })
        }
        other => other.into(),
    })?;
    Ok((g.value(loss).item(), grads))
}

/// Mean loss and gradient over a batch; summation order is fixed.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[&[f64]],
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| sequence_loss_and_grads(params, s))
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for (l, gs) in per {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grads))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Train a freshly initialized model.
pub fn train(
    model: ModelParams,
    data: &TrajectoryDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let state = TrainState::new(model, config.learning_rate, config.seed);
    train_with(state, data, config, &mut NoObserver)
}

/// Continue training from `state` until `config.epochs` epochs are complete.
pub fn train_with(
    mut state: TrainState,
    data: &TrajectoryDataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    state.adam.config.learning_rate = config.learning_rate;
    let inputs: Vec<Vec<f64>> = (0..data.trajectories.len()).map(|i| data.model_input(i)).collect();
    let mut records = Vec::new();
    let mut last_good: Option<Box<TrainState>> = None;
    let mut final_mase = f64::NAN;

    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut order = data.train.clone();
        let mut rng = seed::rng(seed::derive(config.seed, epoch as u64), seed::stream::SHUFFLE);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let result = batch_loss_and_grads(&state.params, &batch);
            let (loss, mut grads) = match result {
                Ok((l, g)) if l.is_finite() => (l, g),
                Ok((l, _)) => return Err(diverged(epoch, format!("loss {l}"), last_good, records)),
                Err(TrainError::Model(e @ ModelError::NonFinite { .. })) => {
                    return Err(diverged(epoch, e.to_string(), last_good, records))
                }
                Err(e) => return Err(e),
            };
            if let Some(c) = config.clip_norm {
                clip(&mut grads, c);
            }
            adam_step(&mut state.params.tensors, &grads, &mut state.adam)?;
            loss_sum += loss;
            batches += 1;
        }
        state.epoch = epoch;
        let train_loss = loss_sum / batches as f64;
        let validation_mase = match evaluate(&state.params, data, Split::Validation) {
            Ok(m) if m.is_finite() => m,
            Ok(m) => return Err(diverged(epoch, format!("validation MASE {m}"), last_good, records)),
            Err(TrainError::Model(e @ ModelError::NonFinite { .. })) => {
                return Err(diverged(epoch, e.to_string(), last_good, records))
            }
            Err(e) => return Err(e),
        };
        final_mase = validation_mase;
        observer
            .on_epoch(&EpochStats { epoch, train_loss, validation_mase })
            .map_err(TrainError::Hook)?;
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            let mut record = CheckpointRecord { epoch, validation_mase, train_loss, snapshot: None };
            observer.on_checkpoint(&state, &mut record).map_err(TrainError::Hook)?;
            records.push(record);
            last_good = Some(Box::new(state.clone()));
        }
    }
    if final_mase.is_nan() {
        final_mase = evaluate(&state.params, data, Split::Validation)?;
    }
    Ok(TrainOutcome { state, records, final_mase, included: final_mase < 1.0 })
}

fn diverged(
    epoch: usize,
    reason: String,
    last_good: Option<Box<TrainState>>,
    records: Vec<CheckpointRecord>,
) -> TrainError {
    TrainError::Diverged { epoch, reason, last_good, records }
}
