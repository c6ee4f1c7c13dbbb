//! SGD with classical momentum, the plateau learning-rate schedule and the
//! training loop built on them.

use crate::error::{Error, Result};
use crate::params::Gradients;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    /// Training stops once the learning rate drops below this.
    pub lr_floor: f64,
    pub batch_size: usize,
    /// Epochs without strict validation improvement before a decay.
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Parallel gradient workers per minibatch; results depend only on this
    /// count and the seed.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_floor: 1e-5,
            batch_size: 64,
            plateau_patience: 3,
            max_epochs: 500,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::config(format!("lr decay factor {} not in (0, 1)", self.lr_decay_factor)));
        }
        if self.plateau_patience == 0 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        if !(self.initial_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning rate must be positive and momentum in [0, 1)"));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::config("batch size and worker count must be positive"));
        }
        Ok(())
    }
}

/// Classical momentum: `v <- momentum * v - lr * g`, then `w <- w + v`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::contract(format!(
            "sgd_step shape mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleAction {
    Continue,
    Decayed,
    Terminate,
}

/// Plateau bookkeeping. The learning rate is derived from the decay count,
/// never accumulated by repeated multiplication.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    initial_lr: f64,
    decay_factor: f64,
    lr_floor: f64,
    patience: usize,
    pub best_val_error: f64,
    pub epochs_since_improvement: usize,
    pub decay_count: u32,
}

impl ScheduleState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            initial_lr: cfg.initial_lr,
            decay_factor: cfg.lr_decay_factor,
            lr_floor: cfg.lr_floor,
            patience: cfg.plateau_patience,
            best_val_error: f64::INFINITY,
            epochs_since_improvement: 0,
            decay_count: 0,
        }
    }

    /// `initial_lr * decay^k`, rounded to 12 significant decimal digits so
    /// that e.g. three decays of 0.01 give exactly `1e-5`.
    pub fn lr(&self) -> f64 {
        let raw = self.initial_lr * self.decay_factor.powi(self.decay_count as i32);
        format!("{raw:.11e}").parse().unwrap_or(raw)
    }

    pub fn update(&mut self, val_error: f64) -> ScheduleAction {
        if val_error < self.best_val_error {
            self.best_val_error = val_error;
            self.epochs_since_improvement = 0;
            return ScheduleAction::Continue;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement < self.patience {
            return ScheduleAction::Continue;
        }
        self.decay_count += 1;
        self.epochs_since_improvement = 0;
        if self.lr() < self.lr_floor {
            ScheduleAction::Terminate
        } else {
            ScheduleAction::Decayed
        }
    }
}

/// Free-function form of [`ScheduleState::update`].
pub fn schedule_update(mut state: ScheduleState, val_error: f64) -> (ScheduleState, ScheduleAction) {
    let action = state.update(val_error);
    (state, action)
}

/// A model the training loop can drive.
pub trait Trainable<T: Scalar>: Clone + Send + Sync {
    type Input: Sync;

    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;
    /// Adds the gradient of the loss on one example into `grads`; returns the loss.
    fn accumulate(&self, x: &Self::Input, label: usize, grads: &mut Gradients<T>) -> Result<T>;
    fn predict_class(&self, x: &Self::Input) -> Result<usize>;

    fn zero_grads(&self) -> Gradients<T> {
        Gradients::zeros_like(&self.params())
    }
}

impl<T: Scalar> Trainable<T> for crate::graph::NetworkGraph<T> {
    type Input = crate::tensor::FeatureMapStack<T>;

    fn params(&self) -> Vec<&[T]> {
        crate::graph::NetworkGraph::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        crate::graph::NetworkGraph::params_mut(self)
    }

    fn accumulate(&self, x: &Self::Input, label: usize, grads: &mut Gradients<T>) -> Result<T> {
        self.loss_and_grads_into(x, label, grads)
    }

    fn predict_class(&self, x: &Self::Input) -> Result<usize> {
        Ok(self.forward(x)?.predicted_class())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LrFloor,
    EpochCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Epoch (1-based) whose parameters were returned; 0 means the initial ones.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON object per line: `{"epoch":..,"train_loss":..,"val_error":..,"lr":..}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in &self.epochs {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<history>", e))?;
        }
        Ok(())
    }
}

/// Fraction of `samples` misclassified by `model`.
pub fn error_rate<T: Scalar, M: Trainable<T>>(model: &M, samples: &[(M::Input, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("cannot measure error on an empty set"));
    }
    let mut wrong = 0usize;
    for (x, y) in samples {
        if model.predict_class(x)? != *y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len() as f64)
}

fn batch_gradient<T: Scalar, M: Trainable<T>>(
    model: &M,
    batch: &[&(M::Input, usize)],
    workers: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Gradients<T>, T)> {
    let chunk = batch.len().div_ceil(workers).max(1);
    let run = |part: &[&(M::Input, usize)]| -> Result<(Gradients<T>, T)> {
        let mut g = model.zero_grads();
        let mut loss = T::zero();
        for (x, y) in part.iter().map(|s| (&s.0, s.1)) {
            loss += model.accumulate(x, y, &mut g)?;
        }
        Ok((g, loss))
    };
    let parts: Vec<Result<(Gradients<T>, T)>> = match pool {
        Some(pool) if workers > 1 => {
            use rayon::prelude::*;
            pool.install(|| batch.par_chunks(chunk).map(run).collect())
        }
        _ => batch.chunks(chunk).map(run).collect(),
    };
    // fixed-order reduction
    let mut iter = parts.into_iter();
    let (mut total, mut loss) = iter.next().ok_or_else(|| Error::contract("empty minibatch"))??;
    for part in iter {
        let (g, l) = part?;
        total.add_assign(&g)?;
        loss += l;
    }
    Ok((total, loss))
}

pub struct TrainOutcome<M> {
    /// Parameters from the epoch with the lowest validation error.
    pub model: M,
    pub history: TrainHistory,
}

/// Minibatch SGD with momentum and the plateau schedule. Minibatch gradients
/// are means over samples; each epoch reshuffles with a seeded generator.
pub fn train<T: Scalar, M: Trainable<T>>(
    mut model: M,
    train_set: &[(M::Input, usize)],
    val_set: &[(M::Input, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    train_with_callback(&mut model, train_set, val_set, cfg, |_| {}).map(|(model, history)| TrainOutcome { model, history })
}

/// [`train`] with a hook invoked after every epoch (logging, progress).
pub fn train_with_callback<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    train_set: &[(M::Input, usize)],
    val_set: &[(M::Input, usize)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(M, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation splits must be non-empty"));
    }
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::config(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut schedule = ScheduleState::new(cfg);
    let mut velocity = model.zero_grads();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut records = Vec::new();
    let mut stop = StopReason::EpochCap;
    let momentum = T::lit(cfg.momentum);

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let lr_t = T::lit(lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&(M::Input, usize)> = idx.iter().map(|&i| &train_set[i]).collect();
            let (mut grads, loss) = batch_gradient(model, &batch, cfg.workers, pool.as_ref())?;
            grads.scale(T::one() / T::from_usize_lossy(batch.len()));
            loss_sum += loss.as_f64();
            for ((p, g), v) in model
                .params_mut()
                .into_iter()
                .zip(&grads.tensors)
                .zip(velocity.tensors.iter_mut())
            {
                sgd_step(p, g, v, lr_t, momentum)?;
            }
        }
        let val_error = error_rate(model, val_set)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_error,
            lr,
        };
        on_epoch(&rec);
        records.push(rec);
        if val_error < best.1 {
            best = (model.clone(), val_error, epoch);
        }
        if schedule.update(val_error) == ScheduleAction::Terminate {
            stop = StopReason::LrFloor;
            break;
        }
    }
    Ok((
        best.0,
        TrainHistory {
            epochs: records,
            stop,
            best_epoch: best.2,
        },
    ))
}
