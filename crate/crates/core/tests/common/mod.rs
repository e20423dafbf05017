//! Test-only oracles, independent of the library's compute path.

#![allow(dead_code)]

use refback::model::Parameters;

/// Naive f64 re-implementation of the forward pass, returning logits rows.
pub fn reference_logits(params: &Parameters, tokens: &[u32], flat: &[f64]) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let (e, dh, v) = (cfg.d_model, cfg.d_head(), cfg.vocab_size);
    let t = tokens.len();
    // unpack the flat parameter vector in canonical tensor order
    let mut offset = 0usize;
    let mut take = |rows: usize, cols: usize| {
        let m: Vec<Vec<f64>> = (0..rows)
            .map(|r| flat[offset + r * cols..offset + (r + 1) * cols].to_vec())
            .collect();
        offset += rows * cols;
        m
    };
    let embed = take(v, e);
    let pos = take(cfg.max_positions, e);
    let mut layers = Vec::new();
    for _ in 0..cfg.n_layers {
        let mut heads = Vec::new();
        for _ in 0..cfg.n_heads {
            let wq = take(e, dh);
            let wk = take(e, dh);
            let wv = take(e, dh);
            let wo = take(dh, e);
            heads.push((wq, wk, wv, wo));
        }
        layers.push(heads);
    }
    let unembed = take(e, v);

    let proj = |x: &[f64], w: &Vec<Vec<f64>>| -> Vec<f64> {
        (0..w[0].len())
            .map(|c| x.iter().enumerate().map(|(r, xv)| xv * w[r][c]).sum())
            .collect()
    };
    let scale = if cfg.scale_attention {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0
    };
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|p| (0..e).map(|c| embed[tokens[p] as usize][c] + pos[p][c]).collect())
        .collect();
    for heads in &layers {
        let mut next = x.clone();
        for (wq, wk, wv, wo) in heads {
            let q: Vec<Vec<f64>> = x.iter().map(|r| proj(r, wq)).collect();
            let k: Vec<Vec<f64>> = x.iter().map(|r| proj(r, wk)).collect();
            let vv: Vec<Vec<f64>> = x.iter().map(|r| proj(r, wv)).collect();
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                let mut mix = vec![0.0; dh];
                for j in 0..=i {
                    for c in 0..dh {
                        mix[c] += ex[j] / z * vv[j][c];
                    }
                }
                let out = proj(&mix, wo);
                for c in 0..e {
                    next[i][c] += out[c];
                }
            }
        }
        x = next;
    }
    x.iter().map(|r| proj(r, &unembed)).collect()
}

/// Summed answer-position cross-entropy under the reference model.
pub fn reference_loss(params: &Parameters, tokens: &[u32], flat: &[f64]) -> f64 {
    let logits = reference_logits(params, tokens, flat);
    (0..tokens.len() / 4)
        .map(|i| {
            let row = &logits[4 * i + 2];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            lse - row[tokens[4 * i + 3] as usize]
        })
        .sum()
}

pub fn flatten(params: &Parameters) -> Vec<f64> {
    params
        .tensors()
        .iter()
        .flat_map(|m| m.data.iter().map(|&x| x as f64))
        .collect()
}

/// Central finite-difference gradient of the mean loss.
pub fn finite_difference_grad(params: &Parameters, batch: &[Vec<u32>], eps: f64) -> Vec<f64> {
    let base = flatten(params);
    let targets: usize = batch.iter().map(|s| s.len() / 4).sum();
    let loss = |flat: &[f64]| -> f64 {
        batch
            .iter()
            .map(|s| reference_loss(params, s, flat))
            .sum::<f64>()
            / targets as f64
    };
    let mut work = base.clone();
    (0..base.len())
        .map(|i| {
            work[i] = base[i] + eps;
            let up = loss(&work);
            work[i] = base[i] - eps;
            let down = loss(&work);
            work[i] = base[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Splits a flat vector into per-tensor slices following `params`.
pub fn split_like<'a>(params: &Parameters, flat: &'a [f64]) -> Vec<(String, &'a [f64])> {
    let mut offset = 0;
    params
        .named_tensors()
        .into_iter()
        .map(|(name, m)| {
            let n = m.data.len();
            let s = &flat[offset..offset + n];
            offset += n;
            (name, s)
        })
        .collect()
}
