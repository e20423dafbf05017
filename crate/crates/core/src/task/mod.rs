//! The textual reference-back task.
//!
//! A sequence is two initialization tuples followed by `scored_tuples`
//! scored tuples. Each tuple occupies four tokens, in order
//! `(instruction, register, symbol, answer)`. The answer compares the
//! symbol against the content of the addressed register *before* the
//! tuple's own instruction is applied.

mod dataset;
mod vocab;

pub use dataset::{
    class_balance, generate_dataset, generate_split, read_dataset, read_manifest, write_dataset,
    ClassBalance, Dataset, DatasetRecord, Manifest, Provenance, Split, SplitSizes,
    GENERATOR_VERSION,
};
pub use vocab::{Token, Vocabulary, NUM_CONTROL_TOKENS};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Number of leading forced-STORE tuples that initialize the registers.
pub const INIT_TUPLES: usize = 2;
pub const NUM_REGISTERS: usize = 2;
pub const TOKENS_PER_TUPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Instruction {
    Ignore,
    Store,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Register {
    R0,
    R1,
}

impl Register {
    pub fn index(self) -> usize {
        match self {
            Register::R0 => 0,
            Register::R1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Register::R0),
            1 => Ok(Register::R1),
            _ => Err(Error::InvalidInput(format!("unknown register index {i}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Register::R0 => Register::R1,
            Register::R1 => Register::R0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Answer {
    Different,
    Same,
}

impl Answer {
    /// 0 = DIFFERENT, 1 = SAME.
    pub fn label(self) -> u8 {
        match self {
            Answer::Different => 0,
            Answer::Same => 1,
        }
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(Answer::Different),
            1 => Ok(Answer::Same),
            _ => Err(Error::InvalidInput(format!("label {label} is not 0 or 1"))),
        }
    }

    pub fn from_same(same: bool) -> Self {
        if same {
            Answer::Same
        } else {
            Answer::Different
        }
    }

    pub fn flipped(self) -> Self {
        Answer::from_same(self == Answer::Different)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tuple {
    pub instruction: Instruction,
    pub register: Register,
    pub symbol: usize,
    pub answer: Answer,
    pub is_init: bool,
}

impl Tuple {
    pub fn scored(instruction: Instruction, register: Register, symbol: usize) -> Self {
        Self {
            instruction,
            register,
            symbol,
            answer: Answer::Different,
            is_init: false,
        }
    }

    pub fn init(register: Register, symbol: usize) -> Self {
        Self {
            instruction: Instruction::Store,
            register,
            symbol,
            answer: Answer::Different,
            is_init: true,
        }
    }
}

/// Token position of tuple `i`'s symbol.
pub fn symbol_position(tuple: usize) -> usize {
    TOKENS_PER_TUPLE * tuple + 2
}

/// Token position of tuple `i`'s answer.
pub fn answer_position(tuple: usize) -> usize {
    TOKENS_PER_TUPLE * tuple + 3
}

/// Position whose logits predict tuple `i`'s answer (its symbol position).
pub fn predicting_position(tuple: usize) -> usize {
    symbol_position(tuple)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_symbols: usize,
    pub num_registers: usize,
    pub scored_tuples: usize,
    pub p_match: f64,
    pub rng_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_symbols: 6,
            num_registers: NUM_REGISTERS,
            scored_tuples: 10,
            p_match: 1.0 / 3.0,
            rng_seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_registers != NUM_REGISTERS {
            return Err(Error::InvalidConfig(format!(
                "num_registers must be {NUM_REGISTERS}, got {}",
                self.num_registers
            )));
        }
        if self.num_symbols < 2 {
            return Err(Error::InvalidConfig("num_symbols must be >= 2".into()));
        }
        if !(self.p_match > 0.0 && self.p_match < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p_match must lie in (0, 1), got {}",
                self.p_match
            )));
        }
        if self.scored_tuples == 0 {
            return Err(Error::InvalidConfig("scored_tuples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_tuples(&self) -> usize {
        INIT_TUPLES + self.scored_tuples
    }

    pub fn sequence_len(&self) -> usize {
        TOKENS_PER_TUPLE * self.total_tuples()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_symbols)
    }
}

/// Answers every tuple from scratch, starting with empty registers.
///
/// A tuple addressing an empty register is answered DIFFERENT, which is
/// exactly the convention used for the initialization tuples.
pub fn oracle_answers(tuples: &[Tuple]) -> Vec<Answer> {
    let mut contents: [Option<usize>; NUM_REGISTERS] = [None; NUM_REGISTERS];
    tuples
        .iter()
        .map(|t| {
            let slot = &mut contents[t.register.index()];
            let answer = Answer::from_same(*slot == Some(t.symbol));
            if t.instruction == Instruction::Store {
                *slot = Some(t.symbol);
            }
            answer
        })
        .collect()
}

/// Answers scored tuples given the registers' initial contents.
pub fn simulate_answers(
    tuples: &[Tuple],
    init_contents: [usize; NUM_REGISTERS],
    num_symbols: usize,
) -> Result<Vec<Tuple>> {
    if let Some(s) = init_contents.iter().find(|&&s| s >= num_symbols) {
        return Err(Error::InvalidInput(format!("initial symbol {s} out of range")));
    }
    let mut contents = init_contents;
    tuples
        .iter()
        .map(|t| {
            if t.symbol >= num_symbols {
                return Err(Error::InvalidInput(format!(
                    "symbol {} out of range (S = {num_symbols})",
                    t.symbol
                )));
            }
            let slot = &mut contents[t.register.index()];
            let mut out = *t;
            out.answer = Answer::from_same(*slot == t.symbol);
            if t.instruction == Instruction::Store {
                *slot = t.symbol;
            }
            Ok(out)
        })
        .collect()
}

/// Most recent tuple before `target` that stored into the target's register.
pub fn stored_tuple(tuples: &[Tuple], target: usize) -> Option<usize> {
    let register = tuples.get(target)?.register;
    (0..target)
        .rev()
        .find(|&j| tuples[j].instruction == Instruction::Store && tuples[j].register == register)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tuples: Vec<Tuple>,
    pub tokens: Vec<u32>,
    /// Answer-token positions of the scored tuples.
    pub answer_positions: Vec<usize>,
    /// Labels at `answer_positions`.
    pub labels: Vec<Answer>,
}

impl Sequence {
    pub fn from_tuples(tuples: Vec<Tuple>, vocab: &Vocabulary) -> Result<Self> {
        let tokens = tokenize_tuples(&tuples, vocab)?;
        let (answer_positions, labels) = tuples
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_init)
            .map(|(i, t)| (answer_position(i), t.answer))
            .unzip();
        Ok(Self {
            tuples,
            tokens,
            answer_positions,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tuple indices that carry a scored answer.
    pub fn scored_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.tuples
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_init)
            .map(|(i, _)| i)
    }
}

fn tokenize_tuples(tuples: &[Tuple], vocab: &Vocabulary) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(tuples.len() * TOKENS_PER_TUPLE);
    for t in tuples {
        ids.push(match t.instruction {
            Instruction::Ignore => Vocabulary::IGNORE,
            Instruction::Store => Vocabulary::STORE,
        });
        ids.push(match t.register {
            Register::R0 => Vocabulary::R0,
            Register::R1 => Vocabulary::R1,
        });
        ids.push(vocab.id(Token::Symbol(t.symbol))?);
        ids.push(match t.answer {
            Answer::Same => Vocabulary::SAME,
            Answer::Different => Vocabulary::DIFFERENT,
        });
    }
    Ok(ids)
}

pub fn tokenize(sequence: &Sequence, vocab: &Vocabulary) -> Result<Vec<u32>> {
    tokenize_tuples(&sequence.tuples, vocab)
}

/// Parses a token stream back into a sequence. The first [`INIT_TUPLES`]
/// tuples are flagged as initialization tuples.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> Result<Sequence> {
    if ids.len() % TOKENS_PER_TUPLE != 0 {
        return Err(Error::InvalidInput(format!(
            "token count {} is not a multiple of {TOKENS_PER_TUPLE}",
            ids.len()
        )));
    }
    let mut tuples = Vec::with_capacity(ids.len() / TOKENS_PER_TUPLE);
    for (i, chunk) in ids.chunks_exact(TOKENS_PER_TUPLE).enumerate() {
        let toks = chunk
            .iter()
            .map(|&id| vocab.token(id))
            .collect::<Result<Vec<_>>>()?;
        let bad = |what: &str, tok: Token| {
            Error::InvalidInput(format!("tuple {i}: expected {what}, found {tok}"))
        };
        let instruction = match toks[0] {
            Token::Store => Instruction::Store,
            Token::Ignore => Instruction::Ignore,
            t => return Err(bad("instruction", t)),
        };
        let register = match toks[1] {
            Token::R0 => Register::R0,
            Token::R1 => Register::R1,
            t => return Err(bad("register", t)),
        };
        let symbol = match toks[2] {
            Token::Symbol(s) => s,
            t => return Err(bad("symbol", t)),
        };
        let answer = match toks[3] {
            Token::Same => Answer::Same,
            Token::Different => Answer::Different,
            t => return Err(bad("answer", t)),
        };
        tuples.push(Tuple {
            instruction,
            register,
            symbol,
            answer,
            is_init: i < INIT_TUPLES,
        });
    }
    Sequence::from_tuples(tuples, vocab)
}

/// Generates one sequence; deterministic in `(config, seed)`.
pub fn generate_sequence(config: &TaskConfig, seed: u64) -> Result<Sequence> {
    config.validate()?;
    let s = config.num_symbols;
    let mut rng = seed::rng(seed);
    let mut tuples = Vec::with_capacity(config.total_tuples());
    let mut contents = [0usize; NUM_REGISTERS];
    for (r, slot) in contents.iter_mut().enumerate() {
        *slot = rng.random_range(0..s);
        tuples.push(Tuple::init(Register::from_index(r)?, *slot));
    }
    let mut scored = Vec::with_capacity(config.scored_tuples);
    let mut live = contents;
    for _ in 0..config.scored_tuples {
        let register = if rng.random_bool(0.5) {
            Register::R1
        } else {
            Register::R0
        };
        let instruction = if rng.random_bool(0.5) {
            Instruction::Store
        } else {
            Instruction::Ignore
        };
        let current = live[register.index()];
        let symbol = if rng.random_bool(config.p_match) {
            current
        } else {
            // uniform over the other S - 1 symbols
            let k = rng.random_range(0..s - 1);
            if k >= current {
                k + 1
            } else {
                k
            }
        };
        if instruction == Instruction::Store {
            live[register.index()] = symbol;
        }
        scored.push(Tuple::scored(instruction, register, symbol));
    }
    tuples.extend(simulate_answers(&scored, contents, s)?);
    Sequence::from_tuples(tuples, &config.vocabulary())
}
