use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ActivationCache, Parameters};
use crate::task::{predicting_position, stored_tuple, symbol_position, Instruction, Sequence};

/// Where attention goes for one prediction.
///
/// Attention to a tuple is read at its symbol position; the full
/// per-position row is kept for other aggregations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionShares {
    pub target: usize,
    pub stored: usize,
    /// Layer 0: mass from each symbol position onto its own tuple's
    /// instruction, register, and symbol, averaged over heads and tuples
    /// up to the target.
    pub layer0_own_tuple: f64,
    /// Last layer: mass from the predicting position onto the stored
    /// tuple's symbol, averaged over heads.
    pub stored_share: f64,
    /// Last-layer head-averaged mass at each earlier tuple's symbol.
    pub per_tuple: Vec<f64>,
    /// Last-layer head-averaged row at the predicting position.
    pub per_position: Vec<f32>,
}

impl AttentionShares {
    /// The stored tuple out-attends every other earlier tuple.
    pub fn stored_dominates(&self) -> bool {
        let s = self.per_tuple[self.stored];
        self.per_tuple
            .iter()
            .enumerate()
            .all(|(j, &x)| j == self.stored || x < s)
    }
}

fn head_mean_row(cache: &ActivationCache, layer: usize, row: usize) -> Vec<f32> {
    let heads = &cache.heads[layer];
    let mut out = vec![0.0f32; cache.seq_len()];
    for h in heads {
        for (o, x) in out.iter_mut().zip(h.attn.row(row)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= heads.len() as f32);
    out
}

/// Attention shares for the prediction of tuple `target`, made at its
/// symbol position.
pub fn attention_shares(
    cache: &ActivationCache,
    seq: &Sequence,
    target: usize,
) -> Result<AttentionShares> {
    let dest = predicting_position(target);
    if target >= seq.tuples.len() || dest >= cache.seq_len() {
        return Err(Error::InvalidInput(format!(
            "target {target} outside a cache of length {}",
            cache.seq_len()
        )));
    }
    let stored = stored_tuple(&seq.tuples, target).ok_or(Error::NoStoredTuple {
        register: seq.tuples[target].register.index(),
        tuple: target,
    })?;

    let mut own = 0.0f64;
    for i in 0..=target {
        let row = head_mean_row(cache, 0, symbol_position(i));
        let base = symbol_position(i) - 2;
        own += row[base..=base + 2].iter().map(|&x| x as f64).sum::<f64>();
    }
    let layer0_own_tuple = own / (target + 1) as f64;

    let last = cache.heads.len() - 1;
    let per_position = head_mean_row(cache, last, dest);
    let per_tuple: Vec<f64> = (0..target)
        .map(|j| per_position[symbol_position(j)] as f64)
        .collect();
    Ok(AttentionShares {
        target,
        stored,
        layer0_own_tuple,
        stored_share: per_tuple[stored],
        per_tuple,
        per_position,
    })
}

/// Mass from a predicting position onto earlier tuples' symbols, split by
/// instruction and by whether the register matches the target's.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TupleMass {
    pub store: f64,
    pub ignore: f64,
    pub same_register: f64,
    pub other_register: f64,
}

pub fn tuple_mass(row: &[f32], seq: &Sequence, target: usize) -> TupleMass {
    let reg = seq.tuples[target].register;
    let mut m = TupleMass::default();
    for (j, t) in seq.tuples[..target].iter().enumerate() {
        let a = row[symbol_position(j)] as f64;
        match t.instruction {
            Instruction::Store => m.store += a,
            Instruction::Ignore => m.ignore += a,
        }
        if t.register == reg {
            m.same_register += a;
        } else {
            m.other_register += a;
        }
    }
    m
}

/// Dataset means over every scored prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub predictions: usize,
    pub layer0_own_tuple: f64,
    pub stored_share: f64,
    /// Fraction of predictions where the stored tuple out-attends every
    /// other earlier tuple.
    pub stored_dominance: f64,
    pub store_share: f64,
    pub ignore_share: f64,
    pub same_register_share: f64,
    pub other_register_share: f64,
}

pub fn summarize_attention(params: &Parameters, sequences: &[Sequence]) -> Result<AttentionSummary> {
    if sequences.is_empty() {
        return Err(Error::Empty("sequence set".into()));
    }
    let per_seq: Vec<Vec<(AttentionShares, TupleMass)>> = sequences
        .par_iter()
        .map(|s| {
            let cache = forward(params, &s.tokens)?;
            s.scored_indices()
                .map(|t| {
                    let sh = attention_shares(&cache, s, t)?;
                    let m = tuple_mass(&sh.per_position, s, t);
                    Ok((sh, m))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let all: Vec<&(AttentionShares, TupleMass)> = per_seq.iter().flatten().collect();
    let n = all.len();
    if n == 0 {
        return Err(Error::Empty("scored predictions".into()));
    }
    let mean = |f: &dyn Fn(&(AttentionShares, TupleMass)) -> f64| {
        all.iter().map(|x| f(x)).sum::<f64>() / n as f64
    };
    Ok(AttentionSummary {
        predictions: n,
        layer0_own_tuple: mean(&|x| x.0.layer0_own_tuple),
        stored_share: mean(&|x| x.0.stored_share),
        stored_dominance: mean(&|x| x.0.stored_dominates() as u8 as f64),
        store_share: mean(&|x| x.1.store),
        ignore_share: mean(&|x| x.1.ignore),
        same_register_share: mean(&|x| x.1.same_register),
        other_register_share: mean(&|x| x.1.other_register),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::task::{generate_sequence, TaskConfig};

    #[test]
    fn uniform_attention_gives_one_over_visible_positions() {
        let mut p = init_params(&ModelConfig::new(16, 12, 48), 4).unwrap();
        for layer in &mut p.layers {
            for h in layer {
                h.w_q.fill(0.0);
            }
        }
        let s = generate_sequence(&TaskConfig::default(), 9).unwrap();
        let cache = forward(&p, &s.tokens).unwrap();
        let sh = attention_shares(&cache, &s, 3).unwrap();
        assert!((sh.stored_share - 1.0 / 15.0).abs() < 1e-6);
        assert!((sh.layer0_own_tuple - (0..=3).map(|i| 3.0 / (4 * i + 3) as f64).sum::<f64>() / 4.0).abs() < 1e-5);
        assert_eq!(sh.per_tuple.len(), 3);
        let total: f32 = sh.per_position.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        let m = tuple_mass(&sh.per_position, &s, 3);
        assert!((m.store + m.ignore - 3.0 / 15.0).abs() < 1e-6);
        assert!((m.same_register + m.other_register - 3.0 / 15.0).abs() < 1e-6);
    }

    #[test]
    fn summary_rejects_empty_input() {
        let p = init_params(&ModelConfig::new(16, 12, 48), 4).unwrap();
        assert!(summarize_attention(&p, &[]).is_err());
    }
}
