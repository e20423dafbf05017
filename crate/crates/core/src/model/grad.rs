//! Answer-position cross-entropy and its analytic gradient.

use rayon::prelude::*;

use super::linalg::{gemm, matmul, Op};
use super::{forward, Matrix, Parameters};
use crate::error::{Error, Result};
use crate::task::{answer_position, predicting_position, TOKENS_PER_TUPLE};

/// Gradients share the parameter layout.
pub type Gradients = Parameters;

/// Sequences per gradient shard; shards are reduced in index order so the
/// result does not depend on the thread count.
const SHARD: usize = 16;

fn target_count(len: usize) -> usize {
    len / TOKENS_PER_TUPLE
}

fn row_log_softmax(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Summed cross-entropy over every answer target of one sequence.
pub fn sequence_loss(params: &Parameters, tokens: &[u32]) -> Result<f32> {
    let cache = forward(params, tokens)?;
    let mut logp = vec![0.0f32; params.config.vocab_size];
    let mut total = 0.0f32;
    for i in 0..target_count(tokens.len()) {
        row_log_softmax(cache.logits.row(predicting_position(i)), &mut logp);
        total -= logp[tokens[answer_position(i)] as usize];
    }
    Ok(total)
}

/// Adds `weight * d(summed loss)/d(params)` for one sequence into `grads`
/// and returns the summed loss.
fn accumulate(
    params: &Parameters,
    tokens: &[u32],
    weight: f32,
    grads: &mut Gradients,
) -> Result<f32> {
    let cfg = &params.config;
    let cache = forward(params, tokens)?;
    let t = tokens.len();
    let vocab = cfg.vocab_size;

    let mut dlogits = Matrix::zeros(t, vocab);
    let mut loss = 0.0f32;
    for i in 0..target_count(t) {
        let p = predicting_position(i);
        let target = tokens[answer_position(i)] as usize;
        let row = dlogits.row_mut(p);
        row_log_softmax(cache.logits.row(p), row);
        loss -= row[target];
        for x in row.iter_mut() {
            *x = x.exp() * weight;
        }
        row[target] -= weight;
    }

    let last = cache.resid.last().expect("resid");
    gemm(Op::t(last), Op::n(&dlogits), 1.0, &mut grads.unembed);
    let mut dres = matmul(Op::n(&dlogits), Op::t(&params.unembed));

    let scale = cfg.score_scale();
    for l in (0..cfg.n_layers).rev() {
        let x = &cache.resid[l];
        let mut dx = dres.clone();
        for h in 0..cfg.n_heads {
            let hp = &params.layers[l][h];
            let hc = &cache.heads[l][h];
            let hg = &mut grads.layers[l][h];

            gemm(Op::t(&hc.z), Op::n(&dres), 1.0, &mut hg.w_o);
            let dz = matmul(Op::n(&dres), Op::t(&hp.w_o));
            let mut ds = matmul(Op::n(&dz), Op::t(&hc.v));
            let dv = matmul(Op::t(&hc.attn), Op::n(&dz));

            for i in 0..t {
                let a = hc.attn.row(i);
                let row = ds.row_mut(i);
                let dot: f32 = a[..=i].iter().zip(&row[..=i]).map(|(a, d)| a * d).sum();
                for j in 0..=i {
                    row[j] = a[j] * (row[j] - dot) * scale;
                }
                row[i + 1..].iter_mut().for_each(|d| *d = 0.0);
            }
            let dq = matmul(Op::n(&ds), Op::n(&hc.k));
            let dk = matmul(Op::t(&ds), Op::n(&hc.q));

            gemm(Op::t(x), Op::n(&dq), 1.0, &mut hg.w_q);
            gemm(Op::t(x), Op::n(&dk), 1.0, &mut hg.w_k);
            gemm(Op::t(x), Op::n(&dv), 1.0, &mut hg.w_v);
            gemm(Op::n(&dq), Op::t(&hp.w_q), 1.0, &mut dx);
            gemm(Op::n(&dk), Op::t(&hp.w_k), 1.0, &mut dx);
            gemm(Op::n(&dv), Op::t(&hp.w_v), 1.0, &mut dx);
        }
        dres = dx;
    }

    for (p, &tok) in tokens.iter().enumerate() {
        let g = dres.row(p);
        for (a, b) in grads.embed.row_mut(tok as usize).iter_mut().zip(g) {
            *a += b;
        }
        for (a, b) in grads.pos_embed.row_mut(p).iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(loss)
}

fn add_grads(into: &mut Gradients, from: &Gradients) {
    for (a, b) in into.tensors_mut().into_iter().zip(from.tensors()) {
        a.add_assign(b);
    }
}

/// Mean cross-entropy over all answer targets in the batch, with gradients.
pub fn loss_and_grads<S: AsRef<[u32]> + Sync>(
    params: &Parameters,
    batch: &[S],
) -> Result<(f32, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let targets: usize = batch.iter().map(|s| target_count(s.as_ref().len())).sum();
    if targets == 0 {
        return Err(Error::InvalidInput("batch has no answer targets".into()));
    }
    let weight = 1.0 / targets as f32;
    let shards: Vec<(f32, Gradients)> = batch
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut g = Gradients::zeros(&params.config);
            let mut loss = 0.0f32;
            for s in chunk {
                loss += accumulate(params, s.as_ref(), weight, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut iter = shards.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        add_grads(&mut grads, &g);
    }
    Ok((loss * weight, grads))
}
