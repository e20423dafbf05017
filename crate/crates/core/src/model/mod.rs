//! Attention-only decoder transformer.
//!
//! Token and absolute positional embeddings feed a residual stream; each
//! layer adds the outputs of its causal attention heads; a linear unembed
//! maps the final stream to vocabulary logits. No biases, no MLPs, no
//! normalization.

mod grad;
pub mod linalg;

pub use grad::{loss_and_grads, sequence_loss, Gradients};
pub use linalg::Matrix;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::task::{predicting_position, Answer, Vocabulary, INIT_TUPLES, TOKENS_PER_TUPLE};
use linalg::{matmul, Op};

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Divide attention scores by `sqrt(d_head)`.
    pub scale_attention: bool,
    /// Standard deviation of the normal initializer.
    #[serde(default = "default_init_std")]
    pub init_std: f32,
}

fn default_init_std() -> f32 {
    INIT_STD
}

impl ModelConfig {
    pub fn new(d_model: usize, vocab_size: usize, max_positions: usize) -> Self {
        Self {
            d_model,
            n_layers: 2,
            n_heads: 2,
            vocab_size,
            max_positions,
            scale_attention: true,
            init_std: INIT_STD,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::InvalidConfig(
                "d_model, n_layers and n_heads must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "init_std must be positive, got {}",
                self.init_std
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size and max_positions must be positive".into(),
            ));
        }
        Ok(())
    }

    fn score_scale(&self) -> f32 {
        if self.scale_attention {
            1.0 / (self.d_head() as f32).sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub pos_embed: Matrix,
    /// `layers[l][h]`
    pub layers: Vec<Vec<HeadParams>>,
    pub unembed: Matrix,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (e, dh) = (config.d_model, config.d_head());
        Self {
            config: config.clone(),
            embed: Matrix::zeros(config.vocab_size, e),
            pos_embed: Matrix::zeros(config.max_positions, e),
            layers: (0..config.n_layers)
                .map(|_| {
                    (0..config.n_heads)
                        .map(|_| HeadParams {
                            w_q: Matrix::zeros(e, dh),
                            w_k: Matrix::zeros(e, dh),
                            w_v: Matrix::zeros(e, dh),
                            w_o: Matrix::zeros(dh, e),
                        })
                        .collect()
                })
                .collect(),
            unembed: Matrix::zeros(e, config.vocab_size),
        }
    }

    /// All tensors in canonical order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                out.push((format!("layers.{l}.heads.{h}.w_q"), &head.w_q));
                out.push((format!("layers.{l}.heads.{h}.w_k"), &head.w_k));
                out.push((format!("layers.{l}.heads.{h}.w_v"), &head.w_v));
                out.push((format!("layers.{l}.heads.{h}.w_o"), &head.w_o));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Same order as [`Parameters::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            for head in layer {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
                out.push(&mut head.w_o);
            }
        }
        out.push(&mut self.unembed);
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

/// I.i.d. normal(0, `init_std`) initialization, deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut params = Parameters::zeros(config);
    let normal = Normal::new(0.0f32, config.init_std).expect("valid std");
    let mut rng = seed::derived_rng(seed, "model/init", 0);
    for tensor in params.tensors_mut() {
        for x in tensor.data.iter_mut() {
            *x = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActivationKind {
    /// Layer-0 residual input (token + positional embedding). Layer and
    /// head are ignored.
    Embed,
    Query,
    Key,
    Value,
    /// A head's contribution to the residual stream (after `W_O`).
    HeadOutput,
}

/// Overwrites one cached activation row during a forward pass, before any
/// consumer reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct Replacement {
    pub layer: usize,
    pub head: usize,
    pub kind: ActivationKind,
    pub position: usize,
    pub value: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Rows are destination positions, columns source positions.
    pub attn: Matrix,
    /// `attn · v`, before the output projection.
    pub z: Matrix,
    pub out: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    /// `resid[0]` is the embedding sum, `resid[l + 1]` follows layer `l`.
    pub resid: Vec<Matrix>,
    pub heads: Vec<Vec<HeadCache>>,
    pub logits: Matrix,
}

impl ActivationCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn activation(&self, layer: usize, head: usize, kind: ActivationKind) -> &Matrix {
        match kind {
            ActivationKind::Embed => &self.resid[0],
            ActivationKind::Query => &self.heads[layer][head].q,
            ActivationKind::Key => &self.heads[layer][head].k,
            ActivationKind::Value => &self.heads[layer][head].v,
            ActivationKind::HeadOutput => &self.heads[layer][head].out,
        }
    }
}

fn check_tokens(params: &Parameters, tokens: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_positions,
        });
    }
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn check_replacements(params: &Parameters, len: usize, reps: &[Replacement]) -> Result<()> {
    let cfg = &params.config;
    for r in reps {
        let width = match r.kind {
            ActivationKind::Embed | ActivationKind::HeadOutput => cfg.d_model,
            _ => cfg.d_head(),
        };
        if r.kind != ActivationKind::Embed && (r.layer >= cfg.n_layers || r.head >= cfg.n_heads) {
            return Err(Error::ComponentOutOfRange(format!(
                "layer {} head {}",
                r.layer, r.head
            )));
        }
        if r.position >= len || r.value.len() != width {
            return Err(Error::ComponentOutOfRange(format!(
                "{:?} replacement at position {} with width {}",
                r.kind,
                r.position,
                r.value.len()
            )));
        }
    }
    Ok(())
}

fn apply(reps: &[Replacement], layer: usize, head: usize, kind: ActivationKind, m: &mut Matrix) {
    for r in reps.iter().filter(|r| {
        r.kind == kind && (kind == ActivationKind::Embed || (r.layer == layer && r.head == head))
    }) {
        m.row_mut(r.position).copy_from_slice(&r.value);
    }
}

/// Causal softmax attention for one head, in place on the score matrix.
fn causal_softmax(scores: &mut Matrix) {
    let t = scores.rows;
    for i in 0..t {
        let row = scores.row_mut(i);
        let max = row[..=i].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for x in row[..=i].iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        row[..=i].iter_mut().for_each(|x| *x *= inv);
        row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
    }
}

pub(crate) fn attention_head(
    cfg: &ModelConfig,
    head: &HeadParams,
    x: &Matrix,
    layer: usize,
    h: usize,
    reps: &[Replacement],
) -> HeadCache {
    let mut q = matmul(Op::n(x), Op::n(&head.w_q));
    let mut k = matmul(Op::n(x), Op::n(&head.w_k));
    let mut v = matmul(Op::n(x), Op::n(&head.w_v));
    apply(reps, layer, h, ActivationKind::Query, &mut q);
    apply(reps, layer, h, ActivationKind::Key, &mut k);
    apply(reps, layer, h, ActivationKind::Value, &mut v);
    let mut attn = matmul(Op::n(&q), Op::t(&k));
    let scale = cfg.score_scale();
    if scale != 1.0 {
        attn.data.iter_mut().for_each(|s| *s *= scale);
    }
    causal_softmax(&mut attn);
    let z = matmul(Op::n(&attn), Op::n(&v));
    let mut out = matmul(Op::n(&z), Op::n(&head.w_o));
    apply(reps, layer, h, ActivationKind::HeadOutput, &mut out);
    HeadCache {
        q,
        k,
        v,
        attn,
        z,
        out,
    }
}

/// Plain forward pass with a fully populated cache.
pub fn forward(params: &Parameters, tokens: &[u32]) -> Result<ActivationCache> {
    forward_with(params, tokens, &[])
}

/// Forward pass with activation replacements applied as they are produced.
pub fn forward_with(
    params: &Parameters,
    tokens: &[u32],
    replacements: &[Replacement],
) -> Result<ActivationCache> {
    check_tokens(params, tokens)?;
    check_replacements(params, tokens.len(), replacements)?;
    let cfg = &params.config;
    let t = tokens.len();
    let e = cfg.d_model;
    let mut x = Matrix::zeros(t, e);
    for (p, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(p);
        for ((r, a), b) in row
            .iter_mut()
            .zip(params.embed.row(tok as usize))
            .zip(params.pos_embed.row(p))
        {
            *r = a + b;
        }
    }
    apply(replacements, 0, 0, ActivationKind::Embed, &mut x);
    let mut resid = vec![x];
    let mut heads = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let input = resid.last().expect("non-empty");
        let layer_cache: Vec<HeadCache> = layer
            .iter()
            .enumerate()
            .map(|(h, hp)| attention_head(cfg, hp, input, l, h, replacements))
            .collect();
        let mut next = input.clone();
        for hc in &layer_cache {
            next.add_assign(&hc.out);
        }
        heads.push(layer_cache);
        resid.push(next);
    }
    let logits = matmul(Op::n(resid.last().expect("non-empty")), Op::n(&params.unembed));
    Ok(ActivationCache {
        tokens: tokens.to_vec(),
        resid,
        heads,
        logits,
    })
}

/// `logit(SAME) - logit(DIFFERENT)` at `position`.
pub fn logit_difference(logits: &Matrix, position: usize) -> f32 {
    let row = logits.row(position);
    row[Vocabulary::SAME as usize] - row[Vocabulary::DIFFERENT as usize]
}

/// Answer chosen between SAME and DIFFERENT only; ties go to DIFFERENT.
pub fn restricted_answer(logits: &Matrix, position: usize) -> Answer {
    Answer::from_same(logit_difference(logits, position) > 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tuple: usize,
    pub answer: Answer,
    pub logit_diff: f32,
    /// The unrestricted argmax was neither SAME nor DIFFERENT.
    pub off_answer_argmax: bool,
}

pub fn predictions_from_logits(logits: &Matrix) -> Vec<Prediction> {
    let n_tuples = logits.rows.div_ceil(TOKENS_PER_TUPLE);
    (INIT_TUPLES..n_tuples)
        .filter(|&i| predicting_position(i) < logits.rows)
        .map(|i| {
            let pos = predicting_position(i);
            let row = logits.row(pos);
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0 as u32;
            Prediction {
                tuple: i,
                answer: restricted_answer(logits, pos),
                logit_diff: logit_difference(logits, pos),
                off_answer_argmax: argmax != Vocabulary::SAME && argmax != Vocabulary::DIFFERENT,
            }
        })
        .collect()
}

/// Predicted answers for every scored tuple of a token sequence.
pub fn predict_answers(params: &Parameters, tokens: &[u32]) -> Result<Vec<Prediction>> {
    let cache = forward(params, tokens)?;
    Ok(predictions_from_logits(&cache.logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Parameters {
        init_params(&ModelConfig::new(16, 12, 48), seed).unwrap()
    }

    fn tokens(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + 3) % 12) as u32).collect()
    }

    #[test]
    fn init_is_deterministic_with_expected_spread() {
        assert_eq!(small(1), small(1));
        assert_ne!(small(1), small(2));
        let p = init_params(&ModelConfig::new(64, 12, 48), 3).unwrap();
        for (name, m) in p.named_tensors() {
            let n = m.data.len() as f64;
            let mean = m.data.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = m.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            assert!((0.015..=0.025).contains(&std), "{name}: {std}");
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cache = forward(&small(0), &[7]).unwrap();
        for layer in &cache.heads {
            for h in layer {
                assert_eq!(h.attn.data, vec![1.0]);
            }
        }
    }

    #[test]
    fn attention_is_causal_and_stochastic() {
        let cache = forward(&small(4), &tokens(48)).unwrap();
        for layer in &cache.heads {
            for h in layer {
                for i in 0..48 {
                    let row = h.attn.row(i);
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(row[i + 1..].iter().all(|&a| a == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut p = small(5);
        for layer in &mut p.layers {
            for h in layer {
                h.w_q.fill(0.0);
            }
        }
        let cache = forward(&p, &tokens(20)).unwrap();
        for layer in &cache.heads {
            for h in layer {
                for i in 0..20 {
                    for j in 0..=i {
                        assert!((h.attn.at(i, j) - 1.0 / (i + 1) as f32).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn residual_stream_is_additive() {
        let cache = forward(&small(6), &tokens(30)).unwrap();
        for l in 0..2 {
            let mut sum = cache.resid[l].clone();
            for h in &cache.heads[l] {
                sum.add_assign(&h.out);
            }
            for (a, b) in sum.data.iter().zip(&cache.resid[l + 1].data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let p = small(7);
        assert_eq!(forward(&p, &tokens(48)).unwrap(), forward(&p, &tokens(48)).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = small(8);
        assert!(matches!(
            forward(&p, &[12]),
            Err(Error::TokenOutOfRange { id: 12, .. })
        ));
        assert!(matches!(
            forward(&p, &tokens(49)),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(ModelConfig::new(10, 12, 48).validate().is_ok());
        let mut bad = ModelConfig::new(10, 12, 48);
        bad.n_heads = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn logit_difference_and_restricted_answer() {
        let mut logits = Matrix::zeros(3, 12);
        logits.row_mut(1)[4] = 2.0;
        logits.row_mut(1)[5] = 2.0;
        assert_eq!(logit_difference(&logits, 1), 0.0);
        logits.row_mut(2)[4] = 3.5;
        logits.row_mut(2)[5] = 1.0;
        assert_eq!(logit_difference(&logits, 2), 2.5);
        assert_eq!(restricted_answer(&logits, 2), Answer::Same);
    }

    #[test]
    fn unembed_bias_toward_same_labels_everything_same() {
        let mut p = small(9);
        p.unembed.fill(0.0);
        for r in 0..p.unembed.rows {
            p.unembed.data[r * 12 + Vocabulary::SAME as usize] = 10.0;
        }
        // make the residual stream positive along every coordinate
        p.embed.fill(1.0);
        let preds = predict_answers(&p, &tokens(48)).unwrap();
        assert_eq!(preds.len(), 10);
        assert!(preds.iter().all(|p| p.answer == Answer::Same && !p.off_answer_argmax));
    }

    #[test]
    fn positional_embeddings_carry_all_order_information() {
        // one layer, zero positional embeddings: the last position's head
        // output is invariant to permutations of earlier tokens
        let mut cfg = ModelConfig::new(8, 12, 8);
        cfg.n_layers = 1;
        let mut p = init_params(&cfg, 10).unwrap();
        p.pos_embed.fill(0.0);
        let base = [3u32, 7, 9, 1, 4];
        let perms = [[3u32, 7, 9, 1], [1, 9, 7, 3], [9, 3, 1, 7], [7, 1, 3, 9]];
        let reference = forward(&p, &base).unwrap();
        for perm in perms {
            let mut toks = perm.to_vec();
            toks.push(4);
            let c = forward(&p, &toks).unwrap();
            for h in 0..2 {
                let a = reference.heads[0][h].out.row(4);
                let b = c.heads[0][h].out.row(4);
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }
}
