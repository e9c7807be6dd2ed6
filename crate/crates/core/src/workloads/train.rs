//! Adam training on freshly generated task batches.

use serde::{Deserialize, Serialize};

use super::tasks::RetrievalTask;
use crate::error::{Error, Result};
use crate::model::{forward_train, Model, ModelConfig, ModelWeights};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTask {
    Passkey,
    Needle,
    Lm,
}

impl TrainTask {
    pub fn retrieval(self) -> Option<RetrievalTask> {
        match self {
            Self::Passkey => Some(RetrievalTask::Passkey),
            Self::Needle => Some(RetrievalTask::Needle),
            Self::Lm => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Linear warmup length; the rate then follows a cosine down to a tenth
    /// of its peak.
    pub warmup_steps: usize,
    /// Seeds both the initial weights and the data stream.
    pub seed: u64,
    pub task: TrainTask,
    /// Retrieval prompt lengths are drawn uniformly from this range.
    pub min_len: usize,
    pub max_len: usize,
    pub key_len: usize,
    /// Restricts the loss to answer tokens instead of every next token.
    pub answer_only: bool,
    /// Window length for language-model training.
    pub chunk_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            warmup_steps: 100,
            seed: 0,
            task: TrainTask::Passkey,
            min_len: 48,
            max_len: 96,
            key_len: 5,
            answer_only: true,
            chunk_len: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0 && self.grad_clip > 0.0) {
            return bad("learning_rate, adam_eps and grad_clip must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} outside (0, 1)"));
            }
        }
        let longest = match self.task {
            TrainTask::Lm => self.chunk_len,
            _ => self.max_len + self.key_len,
        };
        if self.task != TrainTask::Lm && (self.min_len == 0 || self.min_len > self.max_len) {
            return bad(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.task == TrainTask::Lm && self.chunk_len < 2 {
            return bad("chunk_len must be at least 2".into());
        }
        if longest > model.max_seq_len + 1 {
            return Err(Error::SequenceTooLong {
                len: longest,
                max: model.max_seq_len,
            });
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = 0.1 * self.learning_rate;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub struct Adam {
    m: ModelWeights,
    v: ModelWeights,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(config: &ModelConfig, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: ModelWeights::zeros_like(config),
            v: ModelWeights::zeros_like(config),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let params = weights.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.params()).zip(ms).zip(vs) {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut());
            for (((w, &g), m), v) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m as f64 / c1;
                let vh = *v as f64 / c2;
                *w -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelWeights, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for p in grads.params_mut() {
            p.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

type Batch = (Vec<Vec<u32>>, Vec<Vec<Option<u32>>>);

/// The deterministic training batch for `step`.
pub fn make_batch(config: &TrainConfig, corpus: Option<&[u32]>, step: usize) -> Result<Batch> {
    let mut tokens = Vec::with_capacity(config.batch_size);
    let mut targets = Vec::with_capacity(config.batch_size);
    for b in 0..config.batch_size {
        let seed = derive_seed(config.seed, &[1, step as u64, b as u64]);
        let mut rng = SplitMix64::new(seed);
        match config.task.retrieval() {
            Some(task) => {
                let len = config.min_len + rng.below(config.max_len - config.min_len + 1);
                let depth = rng.next_f64();
                let sample = task.generate(rng.next_u64(), len, depth, config.key_len)?;
                let (t, y) = sample.training_pair(config.answer_only);
                tokens.push(t);
                targets.push(y);
            }
            None => {
                let corpus = corpus.ok_or_else(|| Error::Config("language-model training needs a corpus".into()))?;
                if corpus.len() < config.chunk_len {
                    return Err(Error::Empty("corpus shorter than one training chunk"));
                }
                let start = rng.below(corpus.len() - config.chunk_len + 1);
                let window = &corpus[start..start + config.chunk_len];
                tokens.push(window[..window.len() - 1].to_vec());
                targets.push(window[1..].iter().map(|&t| Some(t)).collect());
            }
        }
    }
    Ok((tokens, targets))
}

pub struct TrainOutcome {
    pub model: Model,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Trains a freshly initialised model. `on_step` sees `(step, loss)` after
/// every update.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    corpus: Option<&[u32]>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    config.validate(model_config)?;
    let mut model = Model::init(model_config.clone(), config.seed)?;
    let mut adam = Adam::new(model_config, config.beta1, config.beta2, config.adam_eps);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (tokens, targets) = make_batch(config, corpus, step)?;
        let (loss, mut grads) = match forward_train(&model, &tokens, &targets) {
            Err(Error::Diverged { loss, .. }) => return Err(Error::Diverged { step, loss }),
            other => other?,
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        clip_grad_norm(&mut grads, config.grad_clip);
        adam.step(&mut model.weights, &grads, config.lr_at(step));
        if !model.weights.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutcome { model, losses })
}
