//! Teacher-forced training with Adam and linear warmup.
//!
//! Per-example gradients may be computed in parallel; they are summed in
//! batch order, so the loss curve does not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::ForwardMode;
use super::{to_f32_grid, Checkpoint, LossBreakdown, Model, ModelError};
use crate::par::Exec;
use crate::tokenizer::{Field, SuperToken};

/// Column names of the loss log.
pub const LOSS_LOG_HEADER: &str = "step,total,family,position,tempo,chord,pedal,pitch,duration";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps over which the learning rate ramps linearly from 0.
    pub warmup_steps: u64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
    /// Drives batch order and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 100,
            clip_norm: None,
            seed: 0,
        }
    }
}

/// One training window: `targets[t]` is the token after `inputs[t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<[usize; 7]>,
    pub targets: Vec<[usize; 7]>,
}

/// Cuts sequences into windows of at most `context` inputs with one-token
/// shifted targets. Sequences shorter than two tokens contribute nothing.
pub fn chunk_corpus(
    corpus: &[Vec<SuperToken>],
    context: usize,
) -> Result<Vec<Example>, ModelError> {
    let mut out = Vec::new();
    for seq in corpus {
        let codes = seq
            .iter()
            .map(Model::token_codes)
            .collect::<Result<Vec<_>, _>>()?;
        let mut start = 0;
        while start + 1 < codes.len() {
            let end = (start + context + 1).min(codes.len());
            out.push(Example {
                inputs: codes[start..end - 1].to_vec(),
                targets: codes[start + 1..end].to_vec(),
            });
            start += context;
        }
    }
    if out.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// 1-based index of the update that produced this loss.
    pub step: u64,
    /// Batch-mean loss before the update.
    pub loss: LossBreakdown,
    pub learning_rate: f64,
}

impl StepStats {
    /// A loss-log line matching [`LOSS_LOG_HEADER`].
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{}", self.step, self.loss.total);
        for v in self.loss.per_field {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

fn mix_seed(seed: u64, step: u64, slot: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z =
        seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ slot.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    examples: Vec<Example>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    exec: Exec,
}

impl Trainer {
    pub fn new(
        model: Model,
        examples: Vec<Example>,
        config: TrainConfig,
    ) -> Result<Self, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        if config.batch_size == 0 {
            return Err(ModelError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        let n = model.parameter_count();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let order = (0..examples.len()).collect();
        Ok(Self {
            model,
            examples,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            cursor: usize::MAX,
            order,
            rng,
            exec: Exec::default(),
            config,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            model: self.model,
            step: self.step,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let size = self.config.batch_size.min(self.examples.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    fn learning_rate(&self, step: u64) -> f64 {
        let warm = if self.config.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.config.learning_rate * warm
    }

    /// Batch-mean loss and gradient at the current weights.
    pub fn batch_gradient(
        &self,
        batch: &[usize],
        step: u64,
    ) -> Result<(LossBreakdown, Vec<f64>), ModelError> {
        let model = &self.model;
        let seed = self.config.seed;
        let results = self.exec.map(batch, |&i| {
            let ex = &self.examples[i];
            let mode = ForwardMode::Train {
                seed: mix_seed(seed, step, i as u64),
            };
            model.loss_and_grad_codes(&ex.inputs, &ex.targets, mode)
        });
        let scale = 1.0 / batch.len() as f64;
        let mut loss = LossBreakdown::default();
        let mut grad = vec![0.0; model.parameter_count()];
        for r in results {
            let (l, g) = r?;
            loss.total += l.total * scale;
            for (a, b) in loss.per_field.iter_mut().zip(l.per_field) {
                *a += b * scale;
            }
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b * scale;
            }
        }
        Ok((loss, grad))
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepStats, ModelError> {
        let step = self.step + 1;
        let batch = self.next_batch();
        let (loss, mut grad) = self.batch_gradient(&batch, step)?;
        if !loss.total.is_finite() {
            let detail = Field::ALL
                .iter()
                .zip(loss.per_field)
                .map(|(f, v)| format!("{}={v}", f.name()))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(ModelError::NonFiniteLoss { step, detail });
        }
        if let Some(max) = self.config.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }

        let lr = self.learning_rate(step);
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(step as i32);
        let bias2 = 1.0 - c.beta2.powi(step as i32);
        let weights = self.model.weights_mut();
        for i in 0..weights.len() {
            let g = grad[i];
            let m = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let update = lr * (m / bias1) / ((v / bias2).sqrt() + c.epsilon);
            weights[i] = to_f32_grid(weights[i] - update);
        }
        self.step = step;
        Ok(StepStats {
            step,
            loss,
            learning_rate: lr,
        })
    }

    /// Runs `steps` updates, handing each result to `on_step`.
    pub fn run<F>(&mut self, steps: u64, mut on_step: F) -> Result<(), ModelError>
    where
        F: FnMut(&StepStats, &Trainer) -> Result<(), ModelError>,
    {
        for _ in 0..steps {
            let stats = self.step()?;
            on_step(&stats, self)?;
        }
        Ok(())
    }
}
