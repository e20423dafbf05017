//! The three gating experiments, run over a set of test sequences.
//!
//! Every experiment path-patches from both layer-0 heads into the last
//! layer, at either the keys of one tuple's symbol position or the query
//! at the predicting position.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pairs::{build_minimal_pair, CorruptionKind, MinimalPair};
use super::shares::tuple_mass;
use super::{head_mean, run_path_patch_full, run_with_path_patch, ComponentRef, PatchResult, PatchRun};
use crate::error::{Error, Result};
use crate::model::{ActivationKind, Parameters};
use crate::seed;
use crate::task::{predicting_position, symbol_position, Sequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    /// STORE→IGNORE on the stored tuple, patched into its keys.
    InputGate,
    /// Register flip on the stored tuple, patched into its keys.
    RoleAddress,
    /// Register flip on the target, patched into the query.
    OutputGate,
}

impl Subtask {
    pub const ALL: [Subtask; 3] = [Subtask::InputGate, Subtask::RoleAddress, Subtask::OutputGate];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::InputGate => "input_gate",
            Subtask::RoleAddress => "role_address",
            Subtask::OutputGate => "output_gate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown subtask `{s}`")))
    }

    pub fn corruption(self) -> CorruptionKind {
        match self {
            Subtask::InputGate => CorruptionKind::StoreToIgnore,
            Subtask::RoleAddress => CorruptionKind::StoredRegisterFlip,
            Subtask::OutputGate => CorruptionKind::TargetRegisterFlip,
        }
    }
}

/// Receiver for a pair: keys at the corrupted tuple's symbol, or the query
/// at the predicting position.
fn receiver(subtask: Subtask, pair: &MinimalPair, last_layer: usize) -> ComponentRef {
    match subtask {
        Subtask::InputGate | Subtask::RoleAddress => ComponentRef::all_heads_at(
            last_layer,
            ActivationKind::Key,
            symbol_position(pair.corruption.tuple),
        ),
        Subtask::OutputGate => ComponentRef::all_heads_at(
            last_layer,
            ActivationKind::Query,
            predicting_position(pair.target),
        ),
    }
}

fn patch(params: &Parameters, subtask: Subtask, pair: &MinimalPair) -> Result<PatchResult> {
    let last = params.config.n_layers - 1;
    run_with_path_patch(
        params,
        pair,
        &ComponentRef::layer_outputs(0),
        &receiver(subtask, pair, last),
    )
}

/// The subtask's patch on one pair, with all three caches.
pub fn subtask_patch_run(params: &Parameters, subtask: Subtask, pair: &MinimalPair) -> Result<PatchRun> {
    let last = params.config.n_layers - 1;
    run_path_patch_full(
        params,
        pair,
        &ComponentRef::layer_outputs(0),
        &receiver(subtask, pair, last),
    )
}

/// Pairs for one subtask, fixed independently of any model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub subtask: Subtask,
    /// Pairs whose label changes under the corruption.
    pub flipping: Vec<MinimalPair>,
    /// Pairs of the same construction whose label does not change.
    pub non_flipping: Vec<MinimalPair>,
    /// Role addressing: the same register flip on an earlier same-register
    /// tuple that is not the stored one.
    pub control: Vec<MinimalPair>,
    /// Output gating: symbol and instruction edits at the target.
    pub insensitivity: Vec<MinimalPair>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.flipping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flipping.is_empty()
    }
}

fn subsample(mut pairs: Vec<MinimalPair>, limit: Option<usize>, rng_seed: u64, tag: u64) -> Vec<MinimalPair> {
    let Some(n) = limit else {
        return pairs;
    };
    if pairs.len() > n {
        let mut rng = seed::derived_rng(rng_seed, "patching/probe", tag);
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        let mut keep = vec![false; pairs.len()];
        idx.iter().for_each(|&i| keep[i] = true);
        let mut k = keep.into_iter();
        pairs.retain(|_| k.next().unwrap_or(false));
    }
    pairs
}

/// Most recent tuple before the stored one that uses the target's register.
fn control_site(seq: &Sequence, stored: usize, target: usize) -> Option<usize> {
    let reg = seq.tuples[target].register;
    (0..stored).rev().find(|&k| seq.tuples[k].register == reg)
}

/// Builds the pairs of `subtask` over `sequences`. With `limit`, each pair
/// list is subsampled to at most that many, seeded by `rng_seed`.
pub fn probe_pairs(
    sequences: &[Sequence],
    vocab: &Vocabulary,
    subtask: Subtask,
    limit: Option<usize>,
    rng_seed: u64,
) -> Result<ProbeSet> {
    let mut flipping = Vec::new();
    let mut non_flipping = Vec::new();
    let mut control = Vec::new();
    let mut insensitivity = Vec::new();
    for seq in sequences {
        for target in seq.scored_indices() {
            let pair = match build_minimal_pair(seq, vocab, subtask.corruption(), target, None) {
                Ok(p) => p,
                Err(Error::InapplicableCorruption(_) | Error::NoStoredTuple { .. }) => continue,
                Err(e) => return Err(e),
            };
            match subtask {
                Subtask::RoleAddress => {
                    if let Some(k) = control_site(seq, pair.stored, target) {
                        let c = build_minimal_pair(
                            seq,
                            vocab,
                            CorruptionKind::StoredRegisterFlip,
                            target,
                            Some(k),
                        )?;
                        control.push(c);
                    }
                }
                Subtask::OutputGate => {
                    insensitivity.push(build_minimal_pair(
                        seq,
                        vocab,
                        CorruptionKind::SymbolFlip,
                        target,
                        None,
                    )?);
                    insensitivity.push(build_minimal_pair(
                        seq,
                        vocab,
                        CorruptionKind::InstructionFlip,
                        target,
                        None,
                    )?);
                }
                Subtask::InputGate => {}
            }
            if pair.flips() {
                flipping.push(pair);
            } else {
                non_flipping.push(pair);
            }
        }
    }
    Ok(ProbeSet {
        subtask,
        flipping: subsample(flipping, limit, rng_seed, 0),
        non_flipping: subsample(non_flipping, limit, rng_seed, 1),
        control: subsample(control, limit, rng_seed, 2),
        insensitivity: subsample(insensitivity, limit, rng_seed, 3),
    })
}

/// One patched pair, flattened for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub target: usize,
    pub corrupted_tuple: usize,
    pub clean_label: u8,
    pub corrupted_label: u8,
    pub clean_prediction: u8,
    pub patched_prediction: u8,
    pub patched_logit_diff: f32,
    pub flipped: bool,
    /// The corrupted sequence's stored tuple out-attends every other
    /// earlier tuple after patching.
    pub redirected: bool,
    pub attention_tv: f64,
    pub ignore_mass: f64,
}

fn record(pair: &MinimalPair, r: &PatchResult) -> PairRecord {
    let row = head_mean(&r.patched_attention);
    let target = pair.target;
    let share = |j: usize| row[symbol_position(j)];
    let s = pair.corrupted_stored;
    let redirected = (0..target).all(|j| j == s || share(j) < share(s));
    // IGNORE mass is judged against the clean sequence's instructions
    let ignore_mass = tuple_mass(&row, &pair.clean, target).ignore;
    PairRecord {
        target,
        corrupted_tuple: pair.corruption.tuple,
        clean_label: pair.clean_label.label(),
        corrupted_label: pair.corrupted_label.label(),
        clean_prediction: r.clean_prediction.label(),
        patched_prediction: r.patched_prediction.label(),
        patched_logit_diff: r.patched_logit_diff,
        flipped: r.flipped,
        redirected,
        attention_tv: r.attention_tv(),
        ignore_mass,
    }
}

fn run_all(params: &Parameters, subtask: Subtask, pairs: &[MinimalPair]) -> Result<Vec<PairRecord>> {
    pairs
        .par_iter()
        .map(|p| patch(params, subtask, p).map(|r| record(p, &r)))
        .collect()
}

fn rate(records: &[PairRecord], f: impl Fn(&PairRecord) -> bool) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| f(r)).count() as f64 / records.len() as f64
}

fn mean(records: &[PairRecord], f: impl Fn(&PairRecord) -> f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

fn max(records: &[PairRecord], f: impl Fn(&PairRecord) -> f64) -> f64 {
    records.iter().map(f).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub pairs: usize,
    /// Patched prediction differs from the clean prediction.
    pub flip_rate: f64,
    /// The clean stored tuple still out-attends every other tuple.
    pub stored_kept_rate: f64,
    pub mean_attention_tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsensitivityReport {
    pub pairs: usize,
    pub mean_attention_tv: f64,
    pub max_attention_tv: f64,
    pub within_tolerance_rate: f64,
}

/// Patched last-layer attention on IGNORE tuples' symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgnoreMass {
    pub patches: usize,
    pub mean: f64,
    pub max: f64,
}

/// Tolerance on attention change for query-insensitive edits.
pub const INSENSITIVITY_TV: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskReport {
    pub subtask: Subtask,
    /// Flip-eligible pairs.
    pub pairs: usize,
    /// Fraction of flip-eligible pairs whose patched prediction becomes
    /// the corrupted label.
    pub accuracy: f64,
    /// Same success criterion over flip-eligible and non-flipping pairs.
    pub all_pairs: usize,
    pub all_pairs_accuracy: f64,
    pub redirect_rate: f64,
    pub mean_attention_tv: f64,
    pub control: Option<ControlReport>,
    pub insensitivity: Option<InsensitivityReport>,
    pub ignore_mass: Option<IgnoreMass>,
    pub records: Vec<PairRecord>,
}

/// Patches every pair of `probe` into `params`.
pub fn run_subtask(params: &Parameters, probe: &ProbeSet) -> Result<SubtaskReport> {
    let subtask = probe.subtask;
    let records = run_all(params, subtask, &probe.flipping)?;
    let non_flipping = run_all(params, subtask, &probe.non_flipping)?;
    let all_pairs = records.len() + non_flipping.len();
    let successes = records
        .iter()
        .chain(&non_flipping)
        .filter(|r| r.patched_prediction == r.corrupted_label)
        .count();
    let all_pairs_accuracy = if all_pairs == 0 {
        0.0
    } else {
        successes as f64 / all_pairs as f64
    };

    let control = if subtask == Subtask::RoleAddress {
        let c: Vec<(PairRecord, bool)> = probe
            .control
            .par_iter()
            .map(|p| {
                let r = patch(params, subtask, p)?;
                let row = head_mean(&r.patched_attention);
                let share = |j: usize| row[symbol_position(j)];
                let kept = (0..p.target).all(|j| j == p.stored || share(j) < share(p.stored));
                Ok((record(p, &r), kept))
            })
            .collect::<Result<_>>()?;
        let recs: Vec<PairRecord> = c.iter().map(|x| x.0.clone()).collect();
        Some(ControlReport {
            pairs: recs.len(),
            flip_rate: rate(&recs, |r| r.patched_prediction != r.clean_prediction),
            stored_kept_rate: if c.is_empty() {
                0.0
            } else {
                c.iter().filter(|x| x.1).count() as f64 / c.len() as f64
            },
            mean_attention_tv: mean(&recs, |r| r.attention_tv),
        })
    } else {
        None
    };

    let (insensitivity, ignore_mass) = if subtask == Subtask::OutputGate {
        let ins = run_all(params, subtask, &probe.insensitivity)?;
        let every: Vec<&PairRecord> = records.iter().chain(&non_flipping).chain(&ins).collect();
        let ignore = IgnoreMass {
            patches: every.len(),
            mean: if every.is_empty() {
                0.0
            } else {
                every.iter().map(|r| r.ignore_mass).sum::<f64>() / every.len() as f64
            },
            max: every.iter().map(|r| r.ignore_mass).fold(0.0, f64::max),
        };
        (
            Some(InsensitivityReport {
                pairs: ins.len(),
                mean_attention_tv: mean(&ins, |r| r.attention_tv),
                max_attention_tv: max(&ins, |r| r.attention_tv),
                within_tolerance_rate: rate(&ins, |r| r.attention_tv <= INSENSITIVITY_TV),
            }),
            Some(ignore),
        )
    } else {
        (None, None)
    };

    Ok(SubtaskReport {
        subtask,
        pairs: records.len(),
        accuracy: rate(&records, |r| r.flipped),
        all_pairs,
        all_pairs_accuracy,
        redirect_rate: rate(&records, |r| r.redirected),
        mean_attention_tv: mean(&records, |r| r.attention_tv),
        control,
        insensitivity,
        ignore_mass,
        records,
    })
}

fn run_full(params: &Parameters, sequences: &[Sequence], vocab: &Vocabulary, subtask: Subtask) -> Result<SubtaskReport> {
    let probe = probe_pairs(sequences, vocab, subtask, None, 0)?;
    run_subtask(params, &probe)
}

/// STORE→IGNORE on the stored tuple, path-patched into its keys.
pub fn exp_input_gate(params: &Parameters, sequences: &[Sequence], vocab: &Vocabulary) -> Result<SubtaskReport> {
    run_full(params, sequences, vocab, Subtask::InputGate)
}

/// Register flip on the stored tuple, path-patched into its keys, with the
/// earlier-tuple control.
pub fn exp_role_address(params: &Parameters, sequences: &[Sequence], vocab: &Vocabulary) -> Result<SubtaskReport> {
    run_full(params, sequences, vocab, Subtask::RoleAddress)
}

/// Register flip on the target, path-patched into the query, with symbol
/// and instruction edits as insensitivity checks.
pub fn exp_output_gate(params: &Parameters, sequences: &[Sequence], vocab: &Vocabulary) -> Result<SubtaskReport> {
    run_full(params, sequences, vocab, Subtask::OutputGate)
}
