//! Minimal pairs, activation patching, path patching, and attention shares.
//!
//! Every patched run starts from the clean input. An activation patch
//! overwrites named components with their values from the corrupted run.
//! A path patch carries the corrupted sender output only into the
//! receiver's inputs; every other consumer of the residual stream keeps
//! reading clean values.

mod pairs;
mod shares;
mod subtasks;

pub use pairs::{build_minimal_pair, Corruption, CorruptionKind, MinimalPair};
pub use shares::{
    attention_shares, summarize_attention, tuple_mass, AttentionShares, AttentionSummary,
    TupleMass,
};
pub use subtasks::{
    exp_input_gate, exp_output_gate, exp_role_address, probe_pairs, run_subtask, ControlReport,
    IgnoreMass, InsensitivityReport, PairRecord, ProbeSet, Subtask, SubtaskReport,
    subtask_patch_run, INSENSITIVITY_TV,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, forward_with, linalg::vec_mat, logit_difference, restricted_answer, ActivationCache,
    ActivationKind, Matrix, ModelConfig, Parameters, Replacement,
};
use crate::task::Answer;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelector {
    All,
    One(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSet {
    All,
    Only(Vec<usize>),
}

/// An addressable activation: one kind, at a layer, for some heads and
/// positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRef {
    pub layer: usize,
    pub heads: HeadSelector,
    pub kind: ActivationKind,
    pub positions: PositionSet,
}

impl ComponentRef {
    pub fn new(layer: usize, heads: HeadSelector, kind: ActivationKind, positions: PositionSet) -> Self {
        Self {
            layer,
            heads,
            kind,
            positions,
        }
    }

    /// Both heads of `layer`, all positions, head outputs.
    pub fn layer_outputs(layer: usize) -> Self {
        Self::new(layer, HeadSelector::All, ActivationKind::HeadOutput, PositionSet::All)
    }

    pub fn all_heads_at(layer: usize, kind: ActivationKind, position: usize) -> Self {
        Self::new(layer, HeadSelector::All, kind, PositionSet::Only(vec![position]))
    }

    fn head_list(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        if self.kind == ActivationKind::Embed {
            return Ok(vec![0]);
        }
        if self.layer >= cfg.n_layers {
            return Err(Error::ComponentOutOfRange(format!(
                "layer {} (model has {})",
                self.layer, cfg.n_layers
            )));
        }
        match self.heads {
            HeadSelector::All => Ok((0..cfg.n_heads).collect()),
            HeadSelector::One(h) if h < cfg.n_heads => Ok(vec![h]),
            HeadSelector::One(h) => Err(Error::ComponentOutOfRange(format!(
                "head {h} (layer has {})",
                cfg.n_heads
            ))),
        }
    }

    fn position_list(&self, len: usize) -> Result<Vec<usize>> {
        match &self.positions {
            PositionSet::All => Ok((0..len).collect()),
            PositionSet::Only(ps) => {
                if let Some(p) = ps.iter().find(|&&p| p >= len) {
                    return Err(Error::ComponentOutOfRange(format!(
                        "position {p} (sequence length {len})"
                    )));
                }
                Ok(ps.clone())
            }
        }
    }

    /// Every `(head, position)` this reference covers.
    pub fn sites(&self, cfg: &ModelConfig, len: usize) -> Result<Vec<(usize, usize)>> {
        let heads = self.head_list(cfg)?;
        let positions = self.position_list(len)?;
        Ok(heads
            .iter()
            .flat_map(|&h| positions.iter().map(move |&p| (h, p)))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub target: usize,
    pub predicting_position: usize,
    pub clean_label: Answer,
    pub corrupted_label: Answer,
    pub clean_prediction: Answer,
    pub clean_logit_diff: f32,
    pub corrupted_prediction: Answer,
    pub corrupted_logit_diff: f32,
    pub patched_prediction: Answer,
    pub patched_logit_diff: f32,
    /// Last-layer attention rows at the predicting position, per head.
    pub clean_attention: Vec<Vec<f32>>,
    pub patched_attention: Vec<Vec<f32>>,
    /// Patched prediction equals the corrupted label, which differs from
    /// the clean label.
    pub flipped: bool,
}

impl PatchResult {
    pub fn mean_clean_attention(&self) -> Vec<f32> {
        head_mean(&self.clean_attention)
    }

    pub fn mean_patched_attention(&self) -> Vec<f32> {
        head_mean(&self.patched_attention)
    }

    /// Total variation between head-averaged clean and patched rows.
    pub fn attention_tv(&self) -> f64 {
        total_variation(&self.mean_clean_attention(), &self.mean_patched_attention())
    }
}

pub(crate) fn head_mean(rows: &[Vec<f32>]) -> Vec<f32> {
    let n = rows.len().max(1) as f32;
    let mut out = vec![0.0f32; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= n);
    out
}

pub fn total_variation(a: &[f32], b: &[f32]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
}

/// Clean, corrupted, and patched caches behind a [`PatchResult`].
#[derive(Clone, Debug)]
pub struct PatchRun {
    pub result: PatchResult,
    pub clean: ActivationCache,
    pub corrupted: ActivationCache,
    pub patched: ActivationCache,
}

fn last_layer_rows(cache: &ActivationCache, position: usize) -> Vec<Vec<f32>> {
    let last = cache.heads.last().expect("at least one layer");
    last.iter().map(|h| h.attn.row(position).to_vec()).collect()
}

fn assemble(
    pair: &MinimalPair,
    clean: ActivationCache,
    corrupted: ActivationCache,
    patched: ActivationCache,
) -> PatchRun {
    let pos = pair.predicting_position();
    let patched_prediction = restricted_answer(&patched.logits, pos);
    let result = PatchResult {
        target: pair.target,
        predicting_position: pos,
        clean_label: pair.clean_label,
        corrupted_label: pair.corrupted_label,
        clean_prediction: restricted_answer(&clean.logits, pos),
        clean_logit_diff: logit_difference(&clean.logits, pos),
        corrupted_prediction: restricted_answer(&corrupted.logits, pos),
        corrupted_logit_diff: logit_difference(&corrupted.logits, pos),
        patched_prediction,
        patched_logit_diff: logit_difference(&patched.logits, pos),
        clean_attention: last_layer_rows(&clean, pos),
        patched_attention: last_layer_rows(&patched, pos),
        flipped: pair.flips() && patched_prediction == pair.corrupted_label,
    };
    PatchRun {
        result,
        clean,
        corrupted,
        patched,
    }
}

/// Replacements copying `components` from `source`.
fn copy_replacements(
    cfg: &ModelConfig,
    source: &ActivationCache,
    components: &[ComponentRef],
) -> Result<Vec<Replacement>> {
    let mut reps = Vec::new();
    for c in components {
        for (head, position) in c.sites(cfg, source.seq_len())? {
            reps.push(Replacement {
                layer: c.layer,
                head,
                kind: c.kind,
                position,
                value: source.activation(c.layer, head, c.kind).row(position).to_vec(),
            });
        }
    }
    Ok(reps)
}

pub fn run_activation_patch_full(
    params: &Parameters,
    pair: &MinimalPair,
    components: &[ComponentRef],
) -> Result<PatchRun> {
    let clean = forward(params, &pair.clean.tokens)?;
    let corrupted = forward(params, &pair.corrupted_tokens)?;
    let reps = copy_replacements(&params.config, &corrupted, components)?;
    let patched = forward_with(params, &pair.clean.tokens, &reps)?;
    Ok(assemble(pair, clean, corrupted, patched))
}

/// Runs the clean input with `components` overwritten by their values from
/// the corrupted run; everything downstream recomputes.
pub fn run_with_activation_patch(
    params: &Parameters,
    pair: &MinimalPair,
    components: &[ComponentRef],
) -> Result<PatchResult> {
    Ok(run_activation_patch_full(params, pair, components)?.result)
}

pub fn run_path_patch_full(
    params: &Parameters,
    pair: &MinimalPair,
    sender: &ComponentRef,
    receiver: &ComponentRef,
) -> Result<PatchRun> {
    let cfg = &params.config;
    if sender.kind == ActivationKind::Embed || receiver.kind == ActivationKind::Embed {
        return Err(Error::ComponentOutOfRange(
            "embeddings cannot be path-patch endpoints".into(),
        ));
    }
    if receiver.layer <= sender.layer {
        return Err(Error::ComponentOutOfRange(format!(
            "receiver layer {} is not downstream of sender layer {}",
            receiver.layer, sender.layer
        )));
    }
    let len = pair.clean.tokens.len();
    let sender_sites = sender.sites(cfg, len)?;
    let receiver_sites = receiver.sites(cfg, len)?;

    let clean = forward(params, &pair.clean.tokens)?;
    let corrupted = forward(params, &pair.corrupted_tokens)?;

    // corrupted sender outputs
    let sender_source = if sender.kind == ActivationKind::HeadOutput {
        None
    } else {
        let reps = copy_replacements(cfg, &corrupted, std::slice::from_ref(sender))?;
        Some(forward_with(params, &pair.clean.tokens, &reps)?)
    };
    let sender_out = |h: usize| -> &Matrix {
        match &sender_source {
            None => &corrupted.heads[sender.layer][h].out,
            Some(c) => &c.heads[sender.layer][h].out,
        }
    };
    let mut receiver_input = clean.resid[receiver.layer].clone();
    for &(h, p) in &sender_sites {
        let corrupt_row = sender_out(h).row(p);
        let clean_row = clean.heads[sender.layer][h].out.row(p);
        for ((x, c), k) in receiver_input.row_mut(p).iter_mut().zip(corrupt_row).zip(clean_row) {
            *x += c - k;
        }
    }

    let kinds: &[ActivationKind] = match receiver.kind {
        ActivationKind::HeadOutput => &[
            ActivationKind::Query,
            ActivationKind::Key,
            ActivationKind::Value,
        ],
        ref k => std::slice::from_ref(k),
    };
    let mut reps = Vec::new();
    for &(h, p) in &receiver_sites {
        let head = &params.layers[receiver.layer][h];
        for &kind in kinds {
            let w = match kind {
                ActivationKind::Query => &head.w_q,
                ActivationKind::Key => &head.w_k,
                _ => &head.w_v,
            };
            reps.push(Replacement {
                layer: receiver.layer,
                head: h,
                kind,
                position: p,
                value: vec_mat(receiver_input.row(p), w),
            });
        }
    }
    let patched = forward_with(params, &pair.clean.tokens, &reps)?;
    Ok(assemble(pair, clean, corrupted, patched))
}

/// Path patch from `sender` into `receiver`. A receiver of kind
/// `HeadOutput` stands for all three of its query, key, and value inputs.
pub fn run_with_path_patch(
    params: &Parameters,
    pair: &MinimalPair,
    sender: &ComponentRef,
    receiver: &ComponentRef,
) -> Result<PatchResult> {
    Ok(run_path_patch_full(params, pair, sender, receiver)?.result)
}

/// Every component of every layer and head at every position.
pub fn all_components(cfg: &ModelConfig) -> Vec<ComponentRef> {
    let mut out = vec![ComponentRef::new(
        0,
        HeadSelector::All,
        ActivationKind::Embed,
        PositionSet::All,
    )];
    for l in 0..cfg.n_layers {
        for kind in [
            ActivationKind::Query,
            ActivationKind::Key,
            ActivationKind::Value,
            ActivationKind::HeadOutput,
        ] {
            out.push(ComponentRef::new(l, HeadSelector::All, kind, PositionSet::All));
        }
    }
    out
}
