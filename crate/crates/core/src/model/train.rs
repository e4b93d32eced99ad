use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Transition;
use crate::error::{Error, Result};
use crate::model::matrix::Matrix;
use crate::model::network::{Batch, DropoutMasks, EffectModel, Params};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs per `train_epochs` call.
    pub epochs: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-5,
            epochs: 10,
            clip_norm: 1.0,
            optimizer: OptimizerKind::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("model.train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("model.train.learning_rate must be > 0".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("model.train.clip_norm must be >= 0".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameter update rule with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: TrainConfig,
    moments: Option<(Params<T>, Params<T>)>,
    updates: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            moments: None,
            updates: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        let lr = T::of(self.config.learning_rate);
        self.updates += 1;
        match self.config.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.named_tensors()) {
                    for (w, &d) in p.iter_mut().zip(g.2) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.config.adam_beta1, self.config.adam_beta2);
                let eps = T::of(self.config.adam_epsilon);
                let t = self.updates as i32;
                let c1 = T::of(1.0 - b1.powi(t));
                let c2 = T::of(1.0 - b2.powi(t));
                let (b1, b2) = (T::of(b1), T::of(b2));
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (grads.zeros_like(), grads.zeros_like()));
                let views = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.named_tensors())
                    .zip(m.tensors_mut().into_iter().zip(v.tensors_mut()));
                for ((p, g), (m, v)) in views {
                    for i in 0..p.len() {
                        let d = g.2[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * d;
                        v[i] = b2 * v[i] + (T::one() - b2) * d * d;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Rescale `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().to_f64_lossy().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

pub(crate) fn batch_from<T: Scalar>(data: &[Transition], idx: &[usize]) -> Result<Batch<T>> {
    let objects: Vec<[f64; 4]> = idx.iter().map(|&i| data[i].object).collect();
    let actions: Vec<[f64; 12]> = idx.iter().map(|&i| data[i].action).collect();
    let effects: Vec<[f64; 3]> = idx.iter().map(|&i| data[i].effect).collect();
    Batch::new(
        Matrix::from_rows(&objects),
        Matrix::from_rows(&actions),
        Matrix::from_rows(&effects),
    )
}

/// Split shuffled indices into mini-batches; a trailing single row joins
/// the previous batch so every batch has a contrastive partner.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Run `config.epochs` passes of shuffled mini-batch updates over `data`.
/// Returns the mean total loss of each epoch.
pub fn train_epochs<T: Scalar, R: Rng + ?Sized>(
    model: &mut EffectModel<T>,
    optimizer: &mut Optimizer<T>,
    data: &[Transition],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Degenerate("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut weighted = 0.0;
        for idx in minibatches(&order, config.batch_size) {
            let batch = batch_from::<T>(data, idx)?;
            let masks = (model.config.dropout_rate > 0.0).then(|| DropoutMasks::sample(model, idx.len(), rng));
            let (parts, mut grads, stats) = model.loss_and_gradients(&batch, masks.as_ref());
            clip_global_norm(&mut grads, config.clip_norm);
            optimizer.step(&mut model.params, &grads);
            model.update_running_stats(&stats);
            model.bump_step();
            weighted += parts.total * idx.len() as f64;
        }
        trace.push(weighted / data.len() as f64);
    }
    Ok(trace)
}
