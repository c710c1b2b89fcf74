//! Autoregressive generation with structural masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ops, Model, ModelError};
use crate::tokenizer::{
    self, Family, Field, Position, SuperToken, Vocabulary, IGNORE, SUBBEATS_PER_BAR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    /// Number of bars in the output, primer bars included.
    pub max_bars: usize,
    /// Per-field temperature; 0 picks the argmax.
    pub temperature: [f64; 7],
    /// Per-field nucleus mass in (0, 1].
    pub top_p: [f64; 7],
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            max_bars: 8,
            temperature: [1.0; 7],
            top_p: [1.0; 7],
            seed: 0,
        }
    }
}

impl SampleOptions {
    pub fn default_primer() -> Vec<SuperToken> {
        vec![SuperToken::bar(), SuperToken::subbeat(0)]
    }

    /// Tokens generated before giving up on seeing EOS or the last bar.
    pub fn token_budget(&self) -> usize {
        4 * self.max_bars * SUBBEATS_PER_BAR as usize
    }
}

/// Incremental decoder that caches per-layer `[q | k | v]` rows.
pub(crate) struct Decoder<'a> {
    model: &'a Model,
    qkv: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub(crate) fn new(model: &'a Model) -> Self {
        Self {
            model,
            qkv: vec![Vec::new(); model.config.n_layers],
            len: 0,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn reset(&mut self) {
        self.qkv.iter_mut().for_each(Vec::clear);
        self.len = 0;
    }

    /// Appends one token and returns the final-norm hidden state at its step.
    /// Arithmetic mirrors the full forward pass operation for operation.
    pub(crate) fn push(&mut self, codes: &[usize; 7]) -> Result<Vec<f64>, ModelError> {
        let m = self.model;
        let cfg = &m.config;
        let ids = &m.layout.ids;
        let (d, ff, heads) = (cfg.d_model, cfg.ff_width, cfg.n_heads);
        let t = self.len;
        if t >= cfg.context {
            return Err(ModelError::SequenceTooLong {
                len: t + 1,
                max: cfg.context,
            });
        }
        let mut concat = vec![0.0; cfg.embed.total()];
        m.gather_embeddings(codes, &mut concat);
        let mut x = vec![0.0; d];
        ops::linear_forward(
            &mut x,
            &concat,
            m.slice(ids.input_w),
            Some(m.slice(ids.input_b)),
            concat.len(),
            d,
        );
        for (xi, p) in x.iter_mut().zip(&m.positional[t * d..(t + 1) * d]) {
            *xi += p;
        }

        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let c3 = 3 * d;
        let (mut mean, mut rstd) = ([0.0], [0.0]);
        for (l, cache) in ids.layers.iter().zip(&mut self.qkv) {
            let mut ln1 = vec![0.0; d];
            ops::layernorm_forward(
                &mut ln1,
                &mut mean,
                &mut rstd,
                &x,
                m.slice(l.ln1_gain),
                m.slice(l.ln1_bias),
                d,
            );
            let mut row = vec![0.0; c3];
            ops::linear_forward(
                &mut row,
                &ln1,
                m.slice(l.qkv_w),
                Some(m.slice(l.qkv_b)),
                d,
                c3,
            );
            cache.extend_from_slice(&row);

            let mut att_y = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for h in 0..heads {
                let q = &row[h * hd..(h + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for (s, score) in scores.iter_mut().enumerate() {
                    let k = &cache[s * c3 + d + h * hd..s * c3 + d + (h + 1) * hd];
                    *score = ops::dot(q, k) * scale;
                    max = max.max(*score);
                }
                let mut sum = 0.0;
                for p in scores.iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in scores.iter_mut() {
                    *p /= sum;
                }
                let y = &mut att_y[h * hd..(h + 1) * hd];
                for (s, &p) in scores.iter().enumerate() {
                    ops::axpy(
                        y,
                        p,
                        &cache[s * c3 + 2 * d + h * hd..s * c3 + 2 * d + (h + 1) * hd],
                    );
                }
            }
            let mut proj = vec![0.0; d];
            ops::linear_forward(
                &mut proj,
                &att_y,
                m.slice(l.proj_w),
                Some(m.slice(l.proj_b)),
                d,
                d,
            );
            let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

            let mut ln2 = vec![0.0; d];
            ops::layernorm_forward(
                &mut ln2,
                &mut mean,
                &mut rstd,
                &x_mid,
                m.slice(l.ln2_gain),
                m.slice(l.ln2_bias),
                d,
            );
            let mut up = vec![0.0; ff];
            ops::linear_forward(&mut up, &ln2, m.slice(l.up_w), Some(m.slice(l.up_b)), d, ff);
            let mut act = vec![0.0; ff];
            ops::gelu_forward(&mut act, &up);
            let mut down = vec![0.0; d];
            ops::linear_forward(
                &mut down,
                &act,
                m.slice(l.down_w),
                Some(m.slice(l.down_b)),
                ff,
                d,
            );
            x = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
        let mut hidden = vec![0.0; d];
        ops::layernorm_forward(
            &mut hidden,
            &mut mean,
            &mut rstd,
            &x,
            m.slice(ids.final_gain),
            m.slice(ids.final_bias),
            d,
        );
        self.len += 1;
        Ok(hidden)
    }

    pub(crate) fn family_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let ids = &self.model.layout.ids;
        let n = Vocabulary::head_size(Field::Family);
        let mut out = vec![0.0; n];
        let d = hidden.len();
        ops::linear_forward(
            &mut out,
            hidden,
            self.model.slice(ids.family_w),
            Some(self.model.slice(ids.family_b)),
            d,
            n,
        );
        out
    }

    /// Logits of a non-family field given the chosen family.
    pub(crate) fn field_logits(&self, hidden: &[f64], family: usize, field: Field) -> Vec<f64> {
        let m = self.model;
        let ids = &m.layout.ids;
        let wf = m.config.embed.family;
        let mut cond = hidden.to_vec();
        cond.extend_from_slice(&m.slice(ids.family_embed)[family * wf..(family + 1) * wf]);
        let i = field.index() - 1;
        let n = Vocabulary::head_size(field);
        let mut out = vec![0.0; n];
        ops::linear_forward(
            &mut out,
            &cond,
            m.slice(ids.field_w[i]),
            Some(m.slice(ids.field_b[i])),
            cond.len(),
            n,
        );
        out
    }
}

/// Draws an index from `logits` restricted to `allowed`.
fn draw(
    logits: &[f64],
    allowed: &[bool],
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    debug_assert!(allowed.iter().any(|&a| a));
    if temperature <= 0.0 {
        let mut best = None;
        for (i, (&l, &ok)) in logits.iter().zip(allowed).enumerate() {
            if ok && best.is_none_or(|(_, b)| l > b) {
                best = Some((i, l));
            }
        }
        return best.expect("some code allowed").0;
    }
    let scaled: Vec<f64> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &ok)| {
            if ok {
                l / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut probs = vec![0.0; scaled.len()];
    ops::softmax(&mut probs, &scaled);

    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    if order.is_empty() {
        // Everything underflowed relative to the max; fall back to argmax.
        return draw(logits, allowed, 0.0, top_p, rng);
    }
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let mut u = rng.random::<f64>() * mass;
    for &i in nucleus {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    *nucleus.last().expect("non-empty nucleus")
}

fn validate_primer(primer: &[SuperToken]) -> Result<(), ModelError> {
    if primer.is_empty() {
        return Err(ModelError::InvalidPrimer("primer is empty".into()));
    }
    if let Some(i) = primer.iter().position(|t| t.family == Family::Eos) {
        return Err(ModelError::InvalidPrimer(format!("EOS at token {i}")));
    }
    tokenizer::decode(primer).map_err(|e| ModelError::InvalidPrimer(e.to_string()))?;
    for t in primer {
        Model::token_codes(t)?;
    }
    Ok(())
}

/// Running bar count and last subbeat of the current bar.
#[derive(Default)]
struct Clock {
    bars: usize,
    subbeat: Option<u8>,
}

impl Clock {
    fn advance(&mut self, token: &SuperToken) {
        match token.position {
            Some(Position::Bar) => {
                self.bars += 1;
                self.subbeat = None;
            }
            Some(Position::Subbeat(k)) => self.subbeat = Some(k),
            None => {}
        }
    }

    fn position_mask(&self) -> Vec<bool> {
        (0..Vocabulary::head_size(Field::Position))
            .map(|c| match Position::from_code(c) {
                None => false,
                Some(Position::Bar) => true,
                Some(Position::Subbeat(k)) => self.subbeat.is_none_or(|s| k > s),
            })
            .collect()
    }
}

/// Continues `primer` until EOS, until the model opens bar `max_bars + 1`, or
/// until the token budget runs out. The result always ends in EOS.
pub fn sample(
    model: &Model,
    primer: &[SuperToken],
    opts: &SampleOptions,
) -> Result<Vec<SuperToken>, ModelError> {
    validate_primer(primer)?;
    if opts.max_bars == 0 {
        return Err(ModelError::InvalidConfig(
            "max_bars must be positive".into(),
        ));
    }
    if let Some(p) = opts.top_p.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(ModelError::InvalidConfig(format!(
            "top_p {p} outside (0, 1]"
        )));
    }
    if opts.temperature.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(ModelError::InvalidConfig(
            "temperature must be finite and non-negative".into(),
        ));
    }

    let context = model.config.context;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tokens = primer.to_vec();
    let mut clock = Clock::default();
    tokens.iter().for_each(|t| clock.advance(t));

    let mut decoder = Decoder::new(model);
    let mut hidden = Vec::new();
    let start = tokens.len().saturating_sub(context);
    for t in &tokens[start..] {
        hidden = decoder.push(&t.codes())?;
    }

    let all = |field: Field| vec![true; Vocabulary::head_size(field)];
    let no_ignore = |field: Field| {
        let mut m = all(field);
        m[IGNORE] = false;
        m
    };
    let budget = opts.token_budget();
    for _ in 0..budget {
        let fam_code = draw(
            &decoder.family_logits(&hidden),
            &all(Field::Family),
            opts.temperature[0],
            opts.top_p[0],
            &mut rng,
        );
        let family = Family::from_code(fam_code).expect("family head covers all families");
        let pick = |field: Field, mask: &[bool], rng: &mut ChaCha8Rng| {
            let i = field.index();
            draw(
                &decoder.field_logits(&hidden, fam_code, field),
                mask,
                opts.temperature[i],
                opts.top_p[i],
                rng,
            )
        };
        let mut codes = [IGNORE; 7];
        codes[0] = fam_code;
        match family {
            Family::Eos => break,
            Family::Metrical => {
                codes[1] = pick(Field::Position, &clock.position_mask(), &mut rng);
                if Position::from_code(codes[1]) == Some(Position::Bar)
                    && clock.bars >= opts.max_bars
                {
                    break;
                }
                for field in [Field::Tempo, Field::Chord, Field::Pedal] {
                    codes[field.index()] = pick(field, &all(field), &mut rng);
                }
            }
            Family::Note => {
                for field in [Field::Pitch, Field::Duration] {
                    codes[field.index()] = pick(field, &no_ignore(field), &mut rng);
                }
            }
        }
        let token = SuperToken::from_codes(codes).expect("masks only admit valid tokens");
        clock.advance(&token);
        tokens.push(token);

        if decoder.len() == context {
            // Re-prime from the most recent half window.
            decoder.reset();
            let keep = (context / 2).max(1);
            for t in &tokens[tokens.len() - keep..tokens.len() - 1] {
                decoder.push(&t.codes())?;
            }
        }
        hidden = decoder.push(&codes)?;
    }
    tokens.push(SuperToken::eos());
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbedWidths, ModelConfig};

    fn model(context: usize) -> Model {
        Model::new(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            ff_width: 32,
            context,
            embed: EmbedWidths {
                family: 4,
                position: 4,
                tempo: 4,
                chord: 4,
                pedal: 4,
                pitch: 8,
                duration: 4,
            },
            dropout: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn incremental_logits_match_full_forward() {
        let m = model(32);
        let opts = SampleOptions {
            max_bars: 2,
            seed: 3,
            ..SampleOptions::default()
        };
        let toks = sample(&m, &SampleOptions::default_primer(), &opts).unwrap();
        let toks = &toks[..toks.len().min(20)];
        let next: Vec<Family> = toks
            .iter()
            .skip(1)
            .map(|t| t.family)
            .chain([Family::Eos])
            .collect();
        let full = m.forward(toks, &next).unwrap();
        let mut dec = Decoder::new(&m);
        for (t, tok) in toks.iter().enumerate() {
            let h = dec.push(&tok.codes()).unwrap();
            assert_eq!(dec.family_logits(&h), full.row(Field::Family, t));
            for field in &Field::ALL[1..] {
                assert_eq!(
                    dec.field_logits(&h, next[t].code(), *field),
                    full.row(*field, t)
                );
            }
        }
    }

    #[test]
    fn samples_are_valid_and_decode() {
        let m = model(24);
        for seed in 0..20 {
            let opts = SampleOptions {
                max_bars: 3,
                seed,
                ..SampleOptions::default()
            };
            let toks = sample(&m, &SampleOptions::default_primer(), &opts).unwrap();
            assert!(toks.len() <= 2 + opts.token_budget() + 1);
            assert_eq!(toks.last().unwrap().family, Family::Eos);
            for t in &toks {
                t.validate().unwrap();
            }
            let dec = tokenizer::decode(&toks).unwrap();
            assert!(!dec.truncated);
            assert!(
                toks.iter()
                    .filter(|t| t.position == Some(Position::Bar))
                    .count()
                    <= 3
            );
        }
    }

    #[test]
    fn zero_temperature_is_greedy_and_seed_free() {
        let m = model(24);
        let greedy = |seed| {
            let opts = SampleOptions {
                max_bars: 2,
                temperature: [0.0; 7],
                seed,
                ..SampleOptions::default()
            };
            sample(&m, &SampleOptions::default_primer(), &opts).unwrap()
        };
        assert_eq!(greedy(1), greedy(2));
    }

    #[test]
    fn draw_respects_mask_and_nucleus() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [5.0, 1.0, 0.0, -1.0];
        let mask = [false, true, true, true];
        for _ in 0..200 {
            assert_ne!(draw(&logits, &mask, 1.0, 1.0, &mut rng), 0);
            // the top remaining code carries well over 10% of the mass
            assert_eq!(draw(&logits, &mask, 1.0, 0.1, &mut rng), 1);
        }
        assert_eq!(draw(&logits, &mask, 0.0, 1.0, &mut rng), 1);
    }

    #[test]
    fn invalid_primers_rejected() {
        let m = model(24);
        let opts = SampleOptions::default();
        for bad in [
            vec![],
            vec![SuperToken::subbeat(0)],
            vec![SuperToken::bar(), SuperToken::eos()],
        ] {
            assert!(matches!(
                sample(&m, &bad, &opts),
                Err(ModelError::InvalidPrimer(_))
            ));
        }
    }
}
