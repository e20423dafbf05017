use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of non-symbol tokens at the start of the vocabulary.
pub const NUM_CONTROL_TOKENS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Ignore,
    Store,
    R0,
    R1,
    Same,
    Different,
    Symbol(usize),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Ignore => f.write_str("IGNORE"),
            Token::Store => f.write_str("STORE"),
            Token::R0 => f.write_str("R0"),
            Token::R1 => f.write_str("R1"),
            Token::Same => f.write_str("SAME"),
            Token::Different => f.write_str("DIFFERENT"),
            Token::Symbol(s) => write!(f, "SYM_{s}"),
        }
    }
}

/// Dense id assignment: `IGNORE, STORE, R0, R1, SAME, DIFFERENT, SYM_0 .. SYM_{S-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    num_symbols: usize,
}

impl Vocabulary {
    pub const IGNORE: u32 = 0;
    pub const STORE: u32 = 1;
    pub const R0: u32 = 2;
    pub const R1: u32 = 3;
    pub const SAME: u32 = 4;
    pub const DIFFERENT: u32 = 5;

    pub fn new(num_symbols: usize) -> Self {
        Self { num_symbols }
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn len(&self) -> usize {
        NUM_CONTROL_TOKENS + self.num_symbols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: Token) -> Result<u32> {
        Ok(match token {
            Token::Ignore => Self::IGNORE,
            Token::Store => Self::STORE,
            Token::R0 => Self::R0,
            Token::R1 => Self::R1,
            Token::Same => Self::SAME,
            Token::Different => Self::DIFFERENT,
            Token::Symbol(s) if s < self.num_symbols => (NUM_CONTROL_TOKENS + s) as u32,
            Token::Symbol(s) => {
                return Err(Error::InvalidInput(format!(
                    "symbol {s} outside pool of {}",
                    self.num_symbols
                )))
            }
        })
    }

    pub fn token(&self, id: u32) -> Result<Token> {
        Ok(match id {
            Self::IGNORE => Token::Ignore,
            Self::STORE => Token::Store,
            Self::R0 => Token::R0,
            Self::R1 => Token::R1,
            Self::SAME => Token::Same,
            Self::DIFFERENT => Token::Different,
            _ if (id as usize) < self.len() => Token::Symbol(id as usize - NUM_CONTROL_TOKENS),
            _ => {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.len(),
                })
            }
        })
    }

    pub fn parse(&self, s: &str) -> Result<Token> {
        let token = match s {
            "IGNORE" => Token::Ignore,
            "STORE" => Token::Store,
            "R0" => Token::R0,
            "R1" => Token::R1,
            "SAME" => Token::Same,
            "DIFFERENT" => Token::Different,
            _ => {
                let idx = s
                    .strip_prefix("SYM_")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown token `{s}`")))?;
                Token::Symbol(idx)
            }
        };
        self.id(token)?;
        Ok(token)
    }

    /// All token strings in id order.
    pub fn table(&self) -> Vec<String> {
        (0..self.len() as u32)
            .map(|id| self.token(id).expect("dense ids").to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_a_dense_bijection() {
        let vocab = Vocabulary::new(6);
        assert_eq!(vocab.len(), 12);
        for id in 0..vocab.len() as u32 {
            let tok = vocab.token(id).unwrap();
            assert_eq!(vocab.id(tok).unwrap(), id);
            assert_eq!(vocab.parse(&tok.to_string()).unwrap(), tok);
        }
        assert!(vocab.token(12).is_err());
        assert!(vocab.id(Token::Symbol(6)).is_err());
        assert!(vocab.parse("SYM_6").is_err());
        assert!(vocab.parse("BOS").is_err());
    }
}
