//! Full-batch Adam training of a [`Model`] on a prepared corpus.

use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::model::{Model, PreparedScene};
use crate::nn::ParamStore;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            bail!(Config, "learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bail!(Config, "Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            bail!(Config, "clip norm must be non-negative");
        }
        Ok(())
    }
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: TrainConfig) -> Self {
        Self {
            config,
            m: zero_like(store),
            v: zero_like(store),
            step: 0,
        }
    }

    /// Applies one update from per-parameter gradients (store order).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let c = self.config;
        let norm = math::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - math::powf(c.beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.step as f64);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grads[i][j] * clip;
                self.m[i][j] = c.beta1 * self.m[i][j] + (1.0 - c.beta1) * g;
                self.v[i][j] = c.beta2 * self.v[i][j] + (1.0 - c.beta2) * g * g;
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                p[j] -= c.learning_rate * mh / (math::sqrt(vh) + c.eps);
            }
        }
    }
}

fn zero_like(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| alloc::vec![0.0; t.numel()]).collect()
}

/// Per-step corpus-mean losses (before each update) plus the loss after the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(self.final_loss)
    }
}

/// Mean loss and summed parameter gradients over the corpus.
pub fn corpus_gradient(model: &Model, corpus: &[PreparedScene]) -> Result<(f64, Vec<Vec<f64>>)> {
    if corpus.is_empty() {
        bail!(Validation, "training corpus is empty");
    }
    let n = corpus.len() as f64;
    let mut total = 0.0;
    let mut grads = zero_like(&model.store);
    for prep in corpus {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let (loss, _) = model.loss(&mut tape, &bound, prep)?;
        total += tape.value(loss).data()[0];
        let g = tape.backward(loss)?;
        for (i, &var) in bound.vars().iter().enumerate() {
            if let Some(gv) = g.get(var) {
                for (a, &b) in grads[i].iter_mut().zip(gv) {
                    *a += b / n;
                }
            }
        }
    }
    Ok((total / n, grads))
}

/// Corpus-mean loss without gradients.
pub fn corpus_loss(model: &Model, corpus: &[PreparedScene]) -> Result<f64> {
    if corpus.is_empty() {
        bail!(Validation, "evaluation corpus is empty");
    }
    let mut total = 0.0;
    for prep in corpus {
        total += model.evaluate_loss(prep)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Full-batch training. A non-finite loss aborts with a numeric error naming the step.
pub fn train_toy(model: &mut Model, corpus: &[PreparedScene], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut adam = Adam::new(&model.store, *config);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grads) = corpus_gradient(model, corpus).map_err(|e| at_step(step, e))?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            bail!(Numeric, "training diverged at step {step} (loss {loss})");
        }
        losses.push(loss);
        adam.update(&mut model.store, &grads);
    }
    let final_loss = corpus_loss(model, corpus).map_err(|e| at_step(config.steps, e))?;
    if !final_loss.is_finite() {
        bail!(Numeric, "training diverged after {} steps", config.steps);
    }
    Ok(TrainReport { losses, final_loss })
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(alloc::format!("step {step}: {m}")),
        other => other,
    }
}
