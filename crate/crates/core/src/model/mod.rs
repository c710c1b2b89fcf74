//! Compound-word Transformer decoder.
//!
//! Each step embeds the seven fields of a [`SuperToken`] separately,
//! concatenates the embeddings and projects them to `d_model`. A pre-norm
//! causal Transformer stack produces a hidden state from which the family of
//! the next token is predicted first; the remaining six field heads then see
//! the hidden state concatenated with an embedding of that family (the true
//! one under teacher forcing, the sampled one at generation time).
//!
//! All arithmetic is `f64`. Parameters are kept on the `f32` grid so
//! checkpoints, which store `f32`, reload bit-exactly.

mod checkpoint;
mod net;
pub mod ops;
mod sample;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{Field, SuperToken, Vocabulary};

pub use checkpoint::Checkpoint;
pub use net::{compound_loss, ForwardMode, Logits, LossBreakdown};
pub use sample::{sample, SampleOptions};
pub use train::{chunk_corpus, Example, StepStats, TrainConfig, Trainer, LOSS_LOG_HEADER};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("{field} code {code} out of range")]
    CodeOutOfRange { field: &'static str, code: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid primer: {0}")]
    InvalidPrimer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-field input embedding widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedWidths {
    pub family: usize,
    pub position: usize,
    pub tempo: usize,
    pub chord: usize,
    pub pedal: usize,
    pub pitch: usize,
    pub duration: usize,
}

impl Default for EmbedWidths {
    fn default() -> Self {
        Self {
            family: 16,
            position: 32,
            tempo: 32,
            chord: 32,
            pedal: 32,
            pitch: 64,
            duration: 32,
        }
    }
}

impl EmbedWidths {
    pub fn as_array(&self) -> [usize; 7] {
        [
            self.family,
            self.position,
            self.tempo,
            self.chord,
            self.pedal,
            self.pitch,
            self.duration,
        ]
    }

    pub fn total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    /// Maximum sequence length in super tokens.
    pub context: usize,
    pub embed: EmbedWidths,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            ff_width: 512,
            context: 256,
            embed: EmbedWidths::default(),
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ff_width == 0
            || self.context == 0
        {
            return bad("all sizes must be positive");
        }
        if self.embed.as_array().contains(&0) {
            return bad("embedding widths must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Name, shape and position of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIds {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub up_w: usize,
    pub up_b: usize,
    pub down_w: usize,
    pub down_b: usize,
}

/// Tensor indices into [`Layout::tensors`].
#[derive(Debug, Clone)]
pub(crate) struct TensorIds {
    pub embed: [usize; 7],
    pub input_w: usize,
    pub input_b: usize,
    pub layers: Vec<LayerIds>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub family_w: usize,
    pub family_b: usize,
    pub family_embed: usize,
    /// Heads for fields 1..7 (all but family).
    pub field_w: [usize; 6],
    pub field_b: [usize; 6],
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub(crate) ids: TensorIds,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let info = TensorInfo {
                name,
                shape,
                offset: total,
            };
            total += info.len();
            tensors.push(info);
            tensors.len() - 1
        };
        let d = cfg.d_model;
        let widths = cfg.embed.as_array();
        let heads = Vocabulary::head_sizes();
        let embed = std::array::from_fn(|i| {
            add(
                format!("embed.{}", Field::ALL[i].name()),
                vec![heads[i], widths[i]],
            )
        });
        let input_w = add("input.weight".into(), vec![d, cfg.embed.total()]);
        let input_b = add("input.bias".into(), vec![d]);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut p =
                    |suffix: &str, shape: Vec<usize>| add(format!("layers.{l}.{suffix}"), shape);
                LayerIds {
                    ln1_gain: p("ln1.gain", vec![d]),
                    ln1_bias: p("ln1.bias", vec![d]),
                    qkv_w: p("attn.qkv.weight", vec![3 * d, d]),
                    qkv_b: p("attn.qkv.bias", vec![3 * d]),
                    proj_w: p("attn.proj.weight", vec![d, d]),
                    proj_b: p("attn.proj.bias", vec![d]),
                    ln2_gain: p("ln2.gain", vec![d]),
                    ln2_bias: p("ln2.bias", vec![d]),
                    up_w: p("ff.up.weight", vec![cfg.ff_width, d]),
                    up_b: p("ff.up.bias", vec![cfg.ff_width]),
                    down_w: p("ff.down.weight", vec![d, cfg.ff_width]),
                    down_b: p("ff.down.bias", vec![d]),
                }
            })
            .collect();
        let final_gain = add("final_ln.gain".into(), vec![d]);
        let final_bias = add("final_ln.bias".into(), vec![d]);
        let family_w = add("head.family.weight".into(), vec![heads[0], d]);
        let family_b = add("head.family.bias".into(), vec![heads[0]]);
        let family_embed = add("head.family_embed".into(), vec![heads[0], cfg.embed.family]);
        let cond = d + cfg.embed.family;
        let mut field_w = [0; 6];
        let mut field_b = [0; 6];
        for i in 0..6 {
            let name = Field::ALL[i + 1].name();
            field_w[i] = add(format!("head.{name}.weight"), vec![heads[i + 1], cond]);
            field_b[i] = add(format!("head.{name}.bias"), vec![heads[i + 1]]);
        }
        Self {
            tensors,
            ids: TensorIds {
                embed,
                input_w,
                input_b,
                layers,
                final_gain,
                final_bias,
                family_w,
                family_b,
                family_embed,
                field_w,
                field_b,
            },
            total,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Decoder weights plus the fixed positional table.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    weights: Vec<f64>,
    positional: Vec<f64>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.layout.total)
            .finish()
    }
}

/// Rounds to the nearest `f32`.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl Model {
    /// Fresh weights drawn from `config.seed`: N(0, 0.02) for matrices,
    /// N(0, 1) for embedding tables, zero biases and unit norm gains.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut weights = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        for t in &layout.tensors {
            let slot = &mut weights[t.range()];
            if t.name.ends_with(".gain") {
                slot.fill(1.0);
            } else if t.name.ends_with(".bias") {
                slot.fill(0.0);
            } else if t.name.starts_with("embed.") || t.name == "head.family_embed" {
                slot.iter_mut()
                    .for_each(|w| *w = to_f32_grid(unit.sample(&mut rng)));
            } else {
                slot.iter_mut()
                    .for_each(|w| *w = to_f32_grid(small.sample(&mut rng)));
            }
        }
        Ok(Self::from_parts(config, weights))
    }

    pub(crate) fn from_parts(config: ModelConfig, weights: Vec<f64>) -> Self {
        let layout = Layout::new(&config);
        assert_eq!(
            weights.len(),
            layout.total,
            "weight buffer does not match layout"
        );
        let positional = ops::sinusoidal_table(config.context, config.d_model);
        Self {
            config,
            layout,
            weights,
            positional,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.total
    }

    /// Flat parameter buffer in layout order.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable access to the flat parameter buffer. Values written here are
    /// used as-is; callers that need checkpoint-exactness should keep them on
    /// the `f32` grid.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.weights[t.range()])
    }

    fn slice(&self, id: usize) -> &[f64] {
        &self.weights[self.layout.tensors[id].range()]
    }

    /// Integer codes of a token, range-checked against the head sizes.
    pub fn token_codes(token: &SuperToken) -> Result<[usize; 7], ModelError> {
        let codes = token.codes();
        let sizes = Vocabulary::head_sizes();
        for (i, (&c, &n)) in codes.iter().zip(&sizes).enumerate() {
            if c >= n {
                return Err(ModelError::CodeOutOfRange {
                    field: Field::ALL[i].name(),
                    code: c,
                });
            }
        }
        Ok(codes)
    }

    /// Input vector for `token` at sequence index `position`: concatenated
    /// field embeddings, projected to `d_model`, plus the sinusoidal code.
    pub fn embed(&self, token: &SuperToken, position: usize) -> Result<Vec<f64>, ModelError> {
        if position >= self.config.context {
            return Err(ModelError::SequenceTooLong {
                len: position + 1,
                max: self.config.context,
            });
        }
        let codes = Self::token_codes(token)?;
        let mut concat = vec![0.0; self.config.embed.total()];
        self.gather_embeddings(&codes, &mut concat);
        let d = self.config.d_model;
        let mut out = vec![0.0; d];
        let ids = &self.layout.ids;
        ops::linear_forward(
            &mut out,
            &concat,
            self.slice(ids.input_w),
            Some(self.slice(ids.input_b)),
            concat.len(),
            d,
        );
        for (o, p) in out
            .iter_mut()
            .zip(&self.positional[position * d..(position + 1) * d])
        {
            *o += p;
        }
        Ok(out)
    }

    fn gather_embeddings(&self, codes: &[usize; 7], out: &mut [f64]) {
        let widths = self.config.embed.as_array();
        let mut at = 0;
        for (f, &code) in codes.iter().enumerate() {
            let w = widths[f];
            let table = self.slice(self.layout.ids.embed[f]);
            out[at..at + w].copy_from_slice(&table[code * w..(code + 1) * w]);
            at += w;
        }
    }
}
