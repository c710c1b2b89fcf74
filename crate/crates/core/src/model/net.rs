//! Full-sequence forward pass, loss and backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, cross_entropy};
use super::{Model, ModelError};
use crate::tokenizer::{Family, Field, SuperToken, Vocabulary, IGNORE};

/// Whether dropout is active. Training mode draws its masks from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
}

/// Per-step logits for every head, row-major `[steps, head_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub steps: usize,
    pub heads: [Vec<f64>; 7],
}

impl Logits {
    fn zeros(steps: usize) -> Self {
        let sizes = Vocabulary::head_sizes();
        Self {
            steps,
            heads: std::array::from_fn(|f| vec![0.0; steps * sizes[f]]),
        }
    }

    pub fn row(&self, field: Field, step: usize) -> &[f64] {
        let n = Vocabulary::head_size(field);
        &self.heads[field.index()][step * n..(step + 1) * n]
    }
}

/// Mean-over-steps cross-entropy, split by field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_field: [f64; 7],
}

/// Masked compound cross-entropy. A field's term is skipped where its target
/// is IGNORE; the family term is always present. When `grad` is given it
/// receives d(loss)/d(logits).
pub fn compound_loss(
    logits: &Logits,
    targets: &[[usize; 7]],
    mut grad: Option<&mut Logits>,
) -> LossBreakdown {
    assert_eq!(logits.steps, targets.len(), "one target per step");
    let steps = targets.len();
    let scale = 1.0 / steps as f64;
    let sizes = Vocabulary::head_sizes();
    let mut out = LossBreakdown::default();
    for (t, target) in targets.iter().enumerate() {
        for f in 0..7 {
            if f > 0 && target[f] == IGNORE {
                continue;
            }
            let n = sizes[f];
            let row = &logits.heads[f][t * n..(t + 1) * n];
            let d = grad
                .as_deref_mut()
                .map(|g| &mut g.heads[f][t * n..(t + 1) * n]);
            out.per_field[f] += cross_entropy(d, row, target[f], scale) * scale;
        }
    }
    out.total = out.per_field.iter().sum();
    out
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    att_y: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
    drop_ff: Option<Vec<f64>>,
}

pub(crate) struct Cache {
    codes: Vec<[usize; 7]>,
    cond_family: Vec<usize>,
    concat: Vec<f64>,
    drop_in: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    hidden: Vec<f64>,
    final_mean: Vec<f64>,
    final_rstd: Vec<f64>,
    cond: Vec<f64>,
}

struct Dropout {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl Dropout {
    /// Applies a fresh inverted-dropout mask in place and returns it.
    fn apply(&mut self, x: &mut [f64]) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        for (v, m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

/// Cuts a flat buffer into per-tensor slices (tensors are contiguous, in order).
fn split_tensors<'a>(mut buf: &'a mut [f64], tensors: &[super::TensorInfo]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(tensors.len());
    for t in tensors {
        let (head, rest) = buf.split_at_mut(t.len());
        out.push(head);
        buf = rest;
    }
    out
}

fn masked(grad: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => grad.iter().zip(m).map(|(g, m)| g * m).collect(),
        None => grad.to_vec(),
    }
}

impl Model {
    fn check_codes(&self, inputs: &[[usize; 7]], cond_family: &[usize]) -> Result<(), ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if inputs.len() > self.config.context {
            return Err(ModelError::SequenceTooLong {
                len: inputs.len(),
                max: self.config.context,
            });
        }
        assert_eq!(
            inputs.len(),
            cond_family.len(),
            "one conditioning family per step"
        );
        let sizes = Vocabulary::head_sizes();
        for codes in inputs {
            for (f, (&c, &n)) in codes.iter().zip(&sizes).enumerate() {
                if c >= n {
                    return Err(ModelError::CodeOutOfRange {
                        field: Field::ALL[f].name(),
                        code: c,
                    });
                }
            }
        }
        if let Some(&c) = cond_family.iter().find(|&&c| c >= sizes[0]) {
            return Err(ModelError::CodeOutOfRange {
                field: "family",
                code: c,
            });
        }
        Ok(())
    }

    /// Teacher-forced logits: step `t` sees `tokens[..=t]` and its field heads
    /// are conditioned on `next_family[t]`.
    pub fn forward(
        &self,
        tokens: &[SuperToken],
        next_family: &[Family],
    ) -> Result<Logits, ModelError> {
        let inputs = tokens
            .iter()
            .map(Model::token_codes)
            .collect::<Result<Vec<_>, _>>()?;
        let cond: Vec<usize> = next_family.iter().map(|f| f.code()).collect();
        Ok(self.forward_codes(&inputs, &cond, ForwardMode::Eval)?.0)
    }

    pub(crate) fn forward_codes(
        &self,
        inputs: &[[usize; 7]],
        cond_family: &[usize],
        mode: ForwardMode,
    ) -> Result<(Logits, Cache), ModelError> {
        self.check_codes(inputs, cond_family)?;
        let cfg = &self.config;
        let ids = &self.layout.ids;
        let (t_len, d, ff, e) = (inputs.len(), cfg.d_model, cfg.ff_width, cfg.embed.total());
        let mut dropout = Dropout {
            rng: match mode {
                ForwardMode::Eval => None,
                ForwardMode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            rate: cfg.dropout,
        };

        let mut concat = vec![0.0; t_len * e];
        for (t, codes) in inputs.iter().enumerate() {
            self.gather_embeddings(codes, &mut concat[t * e..(t + 1) * e]);
        }
        let mut x = vec![0.0; t_len * d];
        ops::linear_forward(
            &mut x,
            &concat,
            self.slice(ids.input_w),
            Some(self.slice(ids.input_b)),
            e,
            d,
        );
        for (xi, p) in x.iter_mut().zip(&self.positional[..t_len * d]) {
            *xi += p;
        }
        let drop_in = dropout.apply(&mut x);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in &ids.layers {
            let x_in = x.clone();
            let mut ln1 = vec![0.0; t_len * d];
            let (mut ln1_mean, mut ln1_rstd) = (vec![0.0; t_len], vec![0.0; t_len]);
            ops::layernorm_forward(
                &mut ln1,
                &mut ln1_mean,
                &mut ln1_rstd,
                &x_in,
                self.slice(l.ln1_gain),
                self.slice(l.ln1_bias),
                d,
            );
            let mut qkv = vec![0.0; t_len * 3 * d];
            ops::linear_forward(
                &mut qkv,
                &ln1,
                self.slice(l.qkv_w),
                Some(self.slice(l.qkv_b)),
                d,
                3 * d,
            );
            let mut att = vec![0.0; cfg.n_heads * t_len * t_len];
            let mut att_y = vec![0.0; t_len * d];
            ops::attention_forward(&mut att_y, &mut att, &qkv, t_len, d, cfg.n_heads);
            let mut proj = vec![0.0; t_len * d];
            ops::linear_forward(
                &mut proj,
                &att_y,
                self.slice(l.proj_w),
                Some(self.slice(l.proj_b)),
                d,
                d,
            );
            let drop_attn = dropout.apply(&mut proj);
            let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();

            let mut ln2 = vec![0.0; t_len * d];
            let (mut ln2_mean, mut ln2_rstd) = (vec![0.0; t_len], vec![0.0; t_len]);
            ops::layernorm_forward(
                &mut ln2,
                &mut ln2_mean,
                &mut ln2_rstd,
                &x_mid,
                self.slice(l.ln2_gain),
                self.slice(l.ln2_bias),
                d,
            );
            let mut up = vec![0.0; t_len * ff];
            ops::linear_forward(
                &mut up,
                &ln2,
                self.slice(l.up_w),
                Some(self.slice(l.up_b)),
                d,
                ff,
            );
            let mut act = vec![0.0; t_len * ff];
            ops::gelu_forward(&mut act, &up);
            let mut down = vec![0.0; t_len * d];
            ops::linear_forward(
                &mut down,
                &act,
                self.slice(l.down_w),
                Some(self.slice(l.down_b)),
                ff,
                d,
            );
            let drop_ff = dropout.apply(&mut down);
            x = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();

            layers.push(LayerCache {
                x_in,
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                att_y,
                drop_attn,
                x_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                up,
                act,
                drop_ff,
            });
        }

        let mut hidden = vec![0.0; t_len * d];
        let (mut final_mean, mut final_rstd) = (vec![0.0; t_len], vec![0.0; t_len]);
        ops::layernorm_forward(
            &mut hidden,
            &mut final_mean,
            &mut final_rstd,
            &x,
            self.slice(ids.final_gain),
            self.slice(ids.final_bias),
            d,
        );

        let mut logits = Logits::zeros(t_len);
        let sizes = Vocabulary::head_sizes();
        ops::linear_forward(
            &mut logits.heads[0],
            &hidden,
            self.slice(ids.family_w),
            Some(self.slice(ids.family_b)),
            d,
            sizes[0],
        );
        let wf = cfg.embed.family;
        let cw = d + wf;
        let fam_table = self.slice(ids.family_embed);
        let mut cond = vec![0.0; t_len * cw];
        for t in 0..t_len {
            cond[t * cw..t * cw + d].copy_from_slice(&hidden[t * d..(t + 1) * d]);
            let f = cond_family[t];
            cond[t * cw + d..(t + 1) * cw].copy_from_slice(&fam_table[f * wf..(f + 1) * wf]);
        }
        for i in 0..6 {
            ops::linear_forward(
                &mut logits.heads[i + 1],
                &cond,
                self.slice(ids.field_w[i]),
                Some(self.slice(ids.field_b[i])),
                cw,
                sizes[i + 1],
            );
        }

        let cache = Cache {
            codes: inputs.to_vec(),
            cond_family: cond_family.to_vec(),
            concat,
            drop_in,
            layers,
            x_final: x,
            hidden,
            final_mean,
            final_rstd,
            cond,
        };
        Ok((logits, cache))
    }

    /// Accumulates parameter gradients for the given logit gradients.
    pub(crate) fn backward(&self, cache: &Cache, dlogits: &Logits, grads: &mut [f64]) {
        let cfg = &self.config;
        let ids = &self.layout.ids;
        let t_len = cache.codes.len();
        let (d, ff, e, wf) = (
            cfg.d_model,
            cfg.ff_width,
            cfg.embed.total(),
            cfg.embed.family,
        );
        let cw = d + wf;
        let sizes = Vocabulary::head_sizes();
        let mut g = split_tensors(grads, &self.layout.tensors);

        let mut dcond = vec![0.0; t_len * cw];
        for i in 0..6 {
            let [dw, db] = g
                .get_disjoint_mut([ids.field_w[i], ids.field_b[i]])
                .expect("distinct tensors");
            ops::linear_backward(
                Some(&mut dcond),
                dw,
                Some(db),
                &dlogits.heads[i + 1],
                &cache.cond,
                self.slice(ids.field_w[i]),
                cw,
                sizes[i + 1],
            );
        }
        let mut dhidden = vec![0.0; t_len * d];
        let fam = &mut g[ids.family_embed];
        for t in 0..t_len {
            dhidden[t * d..(t + 1) * d].copy_from_slice(&dcond[t * cw..t * cw + d]);
            let f = cache.cond_family[t];
            ops::axpy(
                &mut fam[f * wf..(f + 1) * wf],
                1.0,
                &dcond[t * cw + d..(t + 1) * cw],
            );
        }
        let [dw, db] = g
            .get_disjoint_mut([ids.family_w, ids.family_b])
            .expect("distinct tensors");
        ops::linear_backward(
            Some(&mut dhidden),
            dw,
            Some(db),
            &dlogits.heads[0],
            &cache.hidden,
            self.slice(ids.family_w),
            d,
            sizes[0],
        );

        let mut dx = vec![0.0; t_len * d];
        let [dgain, dbias] = g
            .get_disjoint_mut([ids.final_gain, ids.final_bias])
            .expect("distinct tensors");
        ops::layernorm_backward(
            &mut dx,
            dgain,
            dbias,
            &dhidden,
            &cache.x_final,
            self.slice(ids.final_gain),
            &cache.final_mean,
            &cache.final_rstd,
            d,
        );

        for (l, lc) in ids.layers.iter().zip(&cache.layers).rev() {
            // x_out = x_mid + dropout(down(gelu(up(ln2(x_mid)))))
            let ddown = masked(&dx, &lc.drop_ff);
            let mut dact = vec![0.0; t_len * ff];
            let [dw, db] = g
                .get_disjoint_mut([l.down_w, l.down_b])
                .expect("distinct tensors");
            ops::linear_backward(
                Some(&mut dact),
                dw,
                Some(db),
                &ddown,
                &lc.act,
                self.slice(l.down_w),
                ff,
                d,
            );
            let mut dup = vec![0.0; t_len * ff];
            ops::gelu_backward(&mut dup, &lc.up, &dact);
            let mut dln2 = vec![0.0; t_len * d];
            let [dw, db] = g
                .get_disjoint_mut([l.up_w, l.up_b])
                .expect("distinct tensors");
            ops::linear_backward(
                Some(&mut dln2),
                dw,
                Some(db),
                &dup,
                &lc.ln2,
                self.slice(l.up_w),
                d,
                ff,
            );
            let mut dx_mid = dx;
            let [dgain, dbias] = g
                .get_disjoint_mut([l.ln2_gain, l.ln2_bias])
                .expect("distinct tensors");
            ops::layernorm_backward(
                &mut dx_mid,
                dgain,
                dbias,
                &dln2,
                &lc.x_mid,
                self.slice(l.ln2_gain),
                &lc.ln2_mean,
                &lc.ln2_rstd,
                d,
            );

            // x_mid = x_in + dropout(proj(attention(qkv(ln1(x_in)))))
            let dproj = masked(&dx_mid, &lc.drop_attn);
            let mut datt_y = vec![0.0; t_len * d];
            let [dw, db] = g
                .get_disjoint_mut([l.proj_w, l.proj_b])
                .expect("distinct tensors");
            ops::linear_backward(
                Some(&mut datt_y),
                dw,
                Some(db),
                &dproj,
                &lc.att_y,
                self.slice(l.proj_w),
                d,
                d,
            );
            let mut dqkv = vec![0.0; t_len * 3 * d];
            ops::attention_backward(&mut dqkv, &datt_y, &lc.qkv, &lc.att, t_len, d, cfg.n_heads);
            let mut dln1 = vec![0.0; t_len * d];
            let [dw, db] = g
                .get_disjoint_mut([l.qkv_w, l.qkv_b])
                .expect("distinct tensors");
            ops::linear_backward(
                Some(&mut dln1),
                dw,
                Some(db),
                &dqkv,
                &lc.ln1,
                self.slice(l.qkv_w),
                d,
                3 * d,
            );
            let mut dx_in = dx_mid;
            let [dgain, dbias] = g
                .get_disjoint_mut([l.ln1_gain, l.ln1_bias])
                .expect("distinct tensors");
            ops::layernorm_backward(
                &mut dx_in,
                dgain,
                dbias,
                &dln1,
                &lc.x_in,
                self.slice(l.ln1_gain),
                &lc.ln1_mean,
                &lc.ln1_rstd,
                d,
            );
            dx = dx_in;
        }

        let dx0 = masked(&dx, &cache.drop_in);
        let mut dconcat = vec![0.0; t_len * e];
        let [dw, db] = g
            .get_disjoint_mut([ids.input_w, ids.input_b])
            .expect("distinct tensors");
        ops::linear_backward(
            Some(&mut dconcat),
            dw,
            Some(db),
            &dx0,
            &cache.concat,
            self.slice(ids.input_w),
            e,
            d,
        );
        let widths = cfg.embed.as_array();
        for (t, codes) in cache.codes.iter().enumerate() {
            let mut at = t * e;
            for f in 0..7 {
                let w = widths[f];
                let table = &mut g[ids.embed[f]];
                ops::axpy(
                    &mut table[codes[f] * w..(codes[f] + 1) * w],
                    1.0,
                    &dconcat[at..at + w],
                );
                at += w;
            }
        }
    }

    /// Loss of predicting `targets[t]` from `inputs[..=t]`, no dropout.
    pub fn loss_codes(
        &self,
        inputs: &[[usize; 7]],
        targets: &[[usize; 7]],
    ) -> Result<LossBreakdown, ModelError> {
        let cond: Vec<usize> = targets.iter().map(|t| t[0]).collect();
        let (logits, _) = self.forward_codes(inputs, &cond, ForwardMode::Eval)?;
        Ok(compound_loss(&logits, targets, None))
    }

    /// Loss and its gradient with respect to every parameter (flat, layout order).
    pub fn loss_and_grad_codes(
        &self,
        inputs: &[[usize; 7]],
        targets: &[[usize; 7]],
        mode: ForwardMode,
    ) -> Result<(LossBreakdown, Vec<f64>), ModelError> {
        let cond: Vec<usize> = targets.iter().map(|t| t[0]).collect();
        let (logits, cache) = self.forward_codes(inputs, &cond, mode)?;
        let mut dlogits = Logits::zeros(logits.steps);
        let loss = compound_loss(&logits, targets, Some(&mut dlogits));
        let mut grads = vec![0.0; self.layout.total];
        self.backward(&cache, &dlogits, &mut grads);
        Ok((loss, grads))
    }

    /// Next-token loss over a whole token sequence (inputs `[..n-1]`, targets `[1..]`).
    pub fn sequence_loss(&self, tokens: &[SuperToken]) -> Result<LossBreakdown, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::EmptySequence);
        }
        let codes = tokens
            .iter()
            .map(Model::token_codes)
            .collect::<Result<Vec<_>, _>>()?;
        self.loss_codes(&codes[..codes.len() - 1], &codes[1..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::NoteDuration;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ff_width: 24,
            context: 16,
            embed: crate::model::EmbedWidths {
                family: 3,
                position: 4,
                tempo: 4,
                chord: 4,
                pedal: 4,
                pitch: 5,
                duration: 4,
            },
            dropout: 0.1,
            seed: 3,
        })
        .unwrap()
    }

    fn tokens() -> Vec<SuperToken> {
        let d = NoteDuration::from_steps(8).unwrap();
        vec![
            SuperToken::bar(),
            SuperToken::subbeat(0).with_pedal(crate::pedal::PedalClass::from_index(2).unwrap()),
            SuperToken::note(60, d),
            SuperToken::note(64, d),
            SuperToken::subbeat(8),
            SuperToken::note(67, d),
            SuperToken::eos(),
        ]
    }

    #[test]
    fn uniform_family_loss_is_ln3() {
        let logits = Logits::zeros(4);
        let targets = vec![[1, 0, 0, 0, 0, 0, 0]; 4];
        let loss = compound_loss(&logits, &targets, None);
        assert!((loss.total - 3f64.ln()).abs() < 1e-12);
        assert_eq!(loss.per_field[1..], [0.0; 6]);
    }

    #[test]
    fn logit_shapes_and_normalization() {
        let model = tiny();
        let toks = tokens();
        let fams: Vec<Family> = toks.iter().map(|t| t.family).collect();
        let logits = model.forward(&toks, &fams).unwrap();
        for (f, field) in Field::ALL.iter().enumerate() {
            assert_eq!(
                logits.heads[f].len(),
                toks.len() * Vocabulary::head_size(*field)
            );
            for t in 0..toks.len() {
                let mut p = vec![0.0; Vocabulary::head_size(*field)];
                ops::softmax(&mut p, logits.row(*field, t));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prefix_logits_ignore_suffix_edits() {
        let model = tiny();
        let toks = tokens();
        let fams: Vec<Family> = toks.iter().map(|t| t.family).collect();
        let a = model.forward(&toks, &fams).unwrap();
        let mut edited = toks.clone();
        edited[4] =
            SuperToken::subbeat(12).with_chord(crate::harmony::ChordLabel::from_code(7).unwrap());
        let b = model.forward(&edited, &fams).unwrap();
        for field in Field::ALL {
            for t in 0..4 {
                assert_eq!(a.row(field, t), b.row(field, t));
            }
        }
        assert_ne!(a.row(Field::Family, 4), b.row(Field::Family, 4));
    }

    #[test]
    fn too_long_and_empty_rejected() {
        let model = tiny();
        let toks = vec![SuperToken::bar(); 17];
        let fams = vec![Family::Metrical; 17];
        assert!(matches!(
            model.forward(&toks, &fams),
            Err(ModelError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(matches!(
            model.forward(&[], &[]),
            Err(ModelError::EmptySequence)
        ));
    }

    #[test]
    fn gradient_matches_finite_differences_with_dropout_seed() {
        // Same dropout seed on every evaluation makes the loss a smooth function.
        let model = tiny();
        let codes: Vec<[usize; 7]> = tokens().iter().map(|t| t.codes()).collect();
        let (inputs, targets) = (&codes[..6], &codes[1..]);
        let mode = ForwardMode::Train { seed: 11 };
        let (_, grads) = model.loss_and_grad_codes(inputs, targets, mode).unwrap();
        let h = 1e-3;
        let mut probe = model.clone();
        let mut worst: f64 = 0.0;
        for i in (0..model.parameter_count()).step_by(37) {
            let orig = probe.weights()[i];
            probe.weights_mut()[i] = orig + h;
            let up = probe
                .loss_and_grad_codes(inputs, targets, mode)
                .unwrap()
                .0
                .total;
            probe.weights_mut()[i] = orig - h;
            let down = probe
                .loss_and_grad_codes(inputs, targets, mode)
                .unwrap()
                .0
                .total;
            probe.weights_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-7);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
