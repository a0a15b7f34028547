use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DropoutCtx, Model, Params};
use super::tape::{Mat, Tape};
use super::{NeuralError, TrainConfig};
use crate::pipeline::{NormalizationParams, WindowedPair, FEATURES};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub norm: Option<NormalizationParams>,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: bool,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NeuralError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        Ok(serde_json::from_str(text)?)
    }
}

pub struct Adam {
    lr: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros = || params.iter().map(|(k, p)| (k.clone(), Mat::zeros(p.rows, p.cols))).collect();
        Self { lr, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for i in 0..p.data.len() {
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * g.data[i];
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * g.data[i] * g.data[i];
                p.data[i] -= self.lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + EPSILON);
            }
        }
    }
}

fn targets(batch: &[&WindowedPair]) -> Mat {
    let m = batch[0].y.len();
    Mat::from_vec(batch.len(), m, batch.iter().flat_map(|p| p.y.iter().copied()).collect())
}

fn windows(batch: &[&WindowedPair]) -> Vec<Vec<[f64; FEATURES]>> {
    batch.iter().map(|p| p.x.clone()).collect()
}

fn batch_step(
    model: &Model,
    batch: &[&WindowedPair],
    dropout: Option<&mut DropoutCtx>,
) -> Result<(f64, Params), NeuralError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let y = model.forward(&mut tape, &bound, &windows(batch), dropout)?;
    let target = targets(batch);
    if tape.value(y).shape() != target.shape() {
        return Err(NeuralError::ShapeMismatch(format!(
            "targets {:?}, model output {:?}",
            target.shape(),
            tape.value(y).shape()
        )));
    }
    let loss = tape.mae(y, target);
    let value = tape.value(loss).data[0];
    let mut grads = tape.backward(loss);
    let out = bound
        .iter()
        .map(|(name, v)| {
            let g = grads[v.0].take().unwrap_or_else(|| {
                let p = &model.params[name];
                Mat::zeros(p.rows, p.cols)
            });
            (name.clone(), g)
        })
        .collect();
    Ok((value, out))
}

/// Inference-mode MAE and its gradient for every parameter.
pub fn loss_and_gradients(model: &Model, pairs: &[WindowedPair]) -> Result<(f64, Params), NeuralError> {
    let batch: Vec<&WindowedPair> = pairs.iter().collect();
    batch_step(model, &batch, None)
}

fn mean_loss(model: &Model, pairs: &[WindowedPair], batch_size: usize) -> Result<f64, NeuralError> {
    let preds = model.predict(&pairs.iter().map(|p| p.x.clone()).collect::<Vec<_>>(), batch_size)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, pair) in preds.iter().zip(pairs) {
        for (a, b) in p.iter().zip(&pair.y) {
            sum += (a - b).abs();
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Splits off the last `fraction` of pairs for validation.
pub fn holdout_split(pairs: &[WindowedPair], fraction: f64) -> (&[WindowedPair], &[WindowedPair]) {
    let n_val = (pairs.len() as f64 * fraction).floor() as usize;
    let n_val = if n_val >= pairs.len() { 0 } else { n_val };
    pairs.split_at(pairs.len() - n_val)
}

/// Trains with Adam on mean absolute error.
pub fn train(
    mut model: Model,
    train_pairs: &[WindowedPair],
    val_pairs: &[WindowedPair],
    cfg: &TrainConfig,
    norm: Option<NormalizationParams>,
) -> Result<Checkpoint, NeuralError> {
    cfg.validate()?;
    model.config.validate()?;
    if train_pairs.is_empty() {
        return Err(NeuralError::EmptyTrainingSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.learning_rate, &model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowedPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (loss, grads) = batch_step(&model, &batch, Some(&mut DropoutCtx { rng: &mut rng }))?;
            if !loss.is_finite() {
                history.push(EpochRecord { epoch, train_loss: loss, val_loss: None });
                let checkpoint = Checkpoint { model, train: cfg.clone(), norm, history, diverged: true };
                return Err(NeuralError::NonFiniteLoss { epoch, checkpoint: Box::new(checkpoint) });
            }
            if grads.values().any(|g| !g.is_finite()) {
                return Err(NeuralError::NonFiniteGradient { epoch });
            }
            adam.step(&mut model.params, &grads);
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_pairs.len() as f64;
        let val_loss = if val_pairs.is_empty() { None } else { Some(mean_loss(&model, val_pairs, cfg.batch_size)?) };
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        history.push(EpochRecord { epoch, train_loss, val_loss });
    }
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        if last.train_loss > first.train_loss {
            warn!("final training loss {} exceeds first-epoch loss {}", last.train_loss, first.train_loss);
        }
    }
    Ok(Checkpoint { model, train: cfg.clone(), norm, history, diverged: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    /// Model outputs in normalized units.
    pub normalized: Vec<Vec<f64>>,
    /// Same, mapped back to seconds.
    pub seconds: Vec<Vec<f64>>,
}

pub fn predict_dataset(checkpoint: &Checkpoint, pairs: &[WindowedPair]) -> Result<Predictions, NeuralError> {
    let norm = checkpoint.norm.as_ref().ok_or(NeuralError::MissingNormalization)?;
    let xs: Vec<_> = pairs.iter().map(|p| p.x.clone()).collect();
    let normalized = if xs.is_empty() { Vec::new() } else { checkpoint.model.predict(&xs, 256)? };
    let seconds = normalized
        .iter()
        .map(|row| row.iter().map(|&v| norm.denormalize_duration(v)).collect())
        .collect();
    Ok(Predictions { normalized, seconds })
}
