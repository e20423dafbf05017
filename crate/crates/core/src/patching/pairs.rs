use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{
    oracle_answers, predicting_position, stored_tuple, Answer, Instruction, Sequence, Tuple,
    Vocabulary, TOKENS_PER_TUPLE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorruptionKind {
    /// A scored STORE becomes IGNORE. Defaults to the stored tuple.
    StoreToIgnore,
    /// Any scored tuple's instruction is swapped. Defaults to the target.
    InstructionFlip,
    /// The stored tuple's register is swapped.
    StoredRegisterFlip,
    /// The target tuple's register is swapped.
    TargetRegisterFlip,
    /// A symbol is replaced by the next one in the pool. Defaults to the
    /// target.
    SymbolFlip,
}

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| Error::InvalidConfig(format!("unknown corruption kind `{s}`")))
    }

    /// Token offset inside a tuple that this corruption edits.
    fn offset(self) -> usize {
        match self {
            CorruptionKind::StoreToIgnore | CorruptionKind::InstructionFlip => 0,
            CorruptionKind::StoredRegisterFlip | CorruptionKind::TargetRegisterFlip => 1,
            CorruptionKind::SymbolFlip => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub tuple: usize,
    pub position: usize,
    pub old_token: u32,
    pub new_token: u32,
}

/// A clean sequence and a single-token corruption of it.
///
/// `corrupted_tokens` differs from the clean tokens at exactly one
/// position; later answer tokens are left as they were. The labels of the
/// corrupted sequence are recomputed by the oracle into `corrupted_tuples`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub clean: Sequence,
    pub corrupted_tokens: Vec<u32>,
    pub corrupted_tuples: Vec<Tuple>,
    pub corruption: Corruption,
    pub target: usize,
    pub stored: usize,
    pub corrupted_stored: usize,
    pub clean_label: Answer,
    pub corrupted_label: Answer,
}

impl MinimalPair {
    pub fn flips(&self) -> bool {
        self.clean_label != self.corrupted_label
    }

    pub fn predicting_position(&self) -> usize {
        predicting_position(self.target)
    }
}

/// Builds a minimal pair for `target`, corrupting tuple `site` (or the
/// kind's default site when `None`).
pub fn build_minimal_pair(
    seq: &Sequence,
    vocab: &Vocabulary,
    kind: CorruptionKind,
    target: usize,
    site: Option<usize>,
) -> Result<MinimalPair> {
    let tuples = &seq.tuples;
    let t = tuples.get(target).ok_or_else(|| {
        Error::InapplicableCorruption(format!("target {target} out of range"))
    })?;
    if t.is_init {
        return Err(Error::InapplicableCorruption(format!(
            "target {target} is an initialization tuple"
        )));
    }
    let stored = stored_tuple(tuples, target).ok_or(Error::NoStoredTuple {
        register: t.register.index(),
        tuple: target,
    })?;
    let site = site.unwrap_or(match kind {
        CorruptionKind::StoreToIgnore | CorruptionKind::StoredRegisterFlip => stored,
        _ => target,
    });
    if site > target {
        return Err(Error::InapplicableCorruption(format!(
            "site {site} is after target {target} and cannot affect its prediction"
        )));
    }
    if kind == CorruptionKind::TargetRegisterFlip && site != target {
        return Err(Error::InapplicableCorruption(
            "target register flip must edit the target".into(),
        ));
    }
    let mut edited = tuples.clone();
    let tuple = &mut edited[site];
    match kind {
        CorruptionKind::StoreToIgnore | CorruptionKind::InstructionFlip => {
            if tuple.is_init {
                return Err(Error::InapplicableCorruption(format!(
                    "tuple {site} is an initialization tuple"
                )));
            }
            if kind == CorruptionKind::StoreToIgnore && tuple.instruction != Instruction::Store {
                return Err(Error::InapplicableCorruption(format!(
                    "tuple {site} holds no STORE"
                )));
            }
            tuple.instruction = match tuple.instruction {
                Instruction::Store => Instruction::Ignore,
                Instruction::Ignore => Instruction::Store,
            };
        }
        CorruptionKind::StoredRegisterFlip | CorruptionKind::TargetRegisterFlip => {
            tuple.register = tuple.register.flipped();
        }
        CorruptionKind::SymbolFlip => {
            tuple.symbol = (tuple.symbol + 1) % vocab.num_symbols();
        }
    }
    let position = site * TOKENS_PER_TUPLE + kind.offset();
    let clean_tokens = &seq.tokens;
    let mut corrupted_tokens = clean_tokens.clone();
    let edited_seq = Sequence::from_tuples(edited.clone(), vocab)?;
    corrupted_tokens[position] = edited_seq.tokens[position];

    let answers = oracle_answers(&edited);
    for (tuple, answer) in edited.iter_mut().zip(answers) {
        tuple.answer = answer;
    }
    let corrupted_stored = stored_tuple(&edited, target).ok_or(Error::NoStoredTuple {
        register: edited[target].register.index(),
        tuple: target,
    })?;
    Ok(MinimalPair {
        clean: seq.clone(),
        corruption: Corruption {
            kind,
            tuple: site,
            position,
            old_token: clean_tokens[position],
            new_token: corrupted_tokens[position],
        },
        corrupted_tokens,
        clean_label: t.answer,
        corrupted_label: edited[target].answer,
        corrupted_tuples: edited,
        target,
        stored,
        corrupted_stored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{detokenize, generate_sequence, Register, TaskConfig};
    use Instruction::{Ignore as Ig, Store as St};
    use Register::{R0, R1};

    fn seq(tuples: Vec<Tuple>) -> Sequence {
        let mut tuples = tuples;
        let answers = oracle_answers(&tuples);
        for (t, a) in tuples.iter_mut().zip(answers) {
            t.answer = a;
        }
        Sequence::from_tuples(tuples, &Vocabulary::new(6)).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(6)
    }

    #[test]
    fn store_to_ignore_flips_iff_previous_store_differs() {
        // R0: init 0, store 3, probe 3 -> SAME; removing the store leaves 0
        let s = seq(vec![
            Tuple::init(R0, 0),
            Tuple::init(R1, 1),
            Tuple::scored(St, R0, 3),
            Tuple::scored(Ig, R0, 3),
        ]);
        let p = build_minimal_pair(&s, &vocab(), CorruptionKind::StoreToIgnore, 3, None).unwrap();
        assert_eq!(p.stored, 2);
        assert_eq!(p.corrupted_stored, 0);
        assert_eq!((p.clean_label, p.corrupted_label), (Answer::Same, Answer::Different));
        assert!(p.flips());

        let same_before = seq(vec![
            Tuple::init(R0, 3),
            Tuple::init(R1, 1),
            Tuple::scored(St, R0, 3),
            Tuple::scored(Ig, R0, 3),
        ]);
        let p = build_minimal_pair(&same_before, &vocab(), CorruptionKind::StoreToIgnore, 3, None)
            .unwrap();
        assert!(!p.flips());
    }

    #[test]
    fn target_register_flip_with_equal_contents_is_a_control() {
        let s = seq(vec![
            Tuple::init(R0, 2),
            Tuple::init(R1, 2),
            Tuple::scored(Ig, R0, 2),
        ]);
        let p =
            build_minimal_pair(&s, &vocab(), CorruptionKind::TargetRegisterFlip, 2, None).unwrap();
        assert_eq!(p.clean_label, p.corrupted_label);
        assert_eq!(p.corrupted_stored, 1);
    }

    #[test]
    fn edits_after_the_target_are_rejected() {
        let s = seq(vec![
            Tuple::init(R0, 0),
            Tuple::init(R1, 1),
            Tuple::scored(Ig, R0, 0),
            Tuple::scored(St, R0, 4),
        ]);
        let e = build_minimal_pair(&s, &vocab(), CorruptionKind::SymbolFlip, 2, Some(3));
        assert!(matches!(e, Err(Error::InapplicableCorruption(_))));
        let e = build_minimal_pair(&s, &vocab(), CorruptionKind::StoreToIgnore, 3, Some(2));
        assert!(matches!(e, Err(Error::InapplicableCorruption(_))));
        let e = build_minimal_pair(&s, &vocab(), CorruptionKind::StoreToIgnore, 3, Some(0));
        assert!(matches!(e, Err(Error::InapplicableCorruption(_))));
        let e = build_minimal_pair(&s, &vocab(), CorruptionKind::SymbolFlip, 1, None);
        assert!(matches!(e, Err(Error::InapplicableCorruption(_))));
    }

    #[test]
    fn emptied_register_is_reported() {
        // moving R0's only store to R1 leaves R0 without a stored tuple
        let s = seq(vec![
            Tuple::init(R0, 0),
            Tuple::init(R1, 1),
            Tuple::scored(Ig, R0, 0),
        ]);
        let e = build_minimal_pair(&s, &vocab(), CorruptionKind::StoredRegisterFlip, 2, None);
        assert!(matches!(e, Err(Error::NoStoredTuple { .. })));
    }

    #[test]
    fn pairs_are_single_token_edits_with_oracle_labels() {
        let cfg = TaskConfig::default();
        let v = cfg.vocabulary();
        let kinds = [
            CorruptionKind::StoreToIgnore,
            CorruptionKind::InstructionFlip,
            CorruptionKind::StoredRegisterFlip,
            CorruptionKind::TargetRegisterFlip,
            CorruptionKind::SymbolFlip,
        ];
        let mut built = 0;
        for seed in 0..200 {
            let s = generate_sequence(&cfg, seed).unwrap();
            for target in s.scored_indices() {
                for kind in kinds {
                    let Ok(p) = build_minimal_pair(&s, &v, kind, target, None) else {
                        continue;
                    };
                    built += 1;
                    let diff: Vec<usize> = (0..s.tokens.len())
                        .filter(|&i| s.tokens[i] != p.corrupted_tokens[i])
                        .collect();
                    assert_eq!(diff, vec![p.corruption.position]);
                    let parsed = detokenize(&p.corrupted_tokens, &v).unwrap();
                    let relabeled = oracle_answers(&parsed.tuples);
                    assert_eq!(relabeled[target], p.corrupted_label);
                    assert_eq!(p.clean_label, s.tuples[target].answer);
                }
            }
        }
        assert!(built > 5000);
    }

    #[test]
    fn corruption_kinds_parse() {
        assert_eq!(
            CorruptionKind::parse("store_to_ignore").unwrap(),
            CorruptionKind::StoreToIgnore
        );
        assert_eq!(
            CorruptionKind::parse("TARGET_REGISTER_FLIP").unwrap(),
            CorruptionKind::TargetRegisterFlip
        );
        assert!(CorruptionKind::parse("bogus").is_err());
    }
}
