//! Token space shared by the environment and the models.
//!
//! Layout (dense ids): `BOS, ASK, ANSWER, EOT, CANNOT_ANSWER`, then one token
//! per fact key, one per fact value, one per answer option.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const ASK: TokenId = 1;
pub const ANSWER: TokenId = 2;
pub const EOT: TokenId = 3;
pub const CANNOT_ANSWER: TokenId = 4;
const FIXED: u32 = 5;

/// What a token stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Bos,
    Ask,
    Answer,
    Eot,
    CannotAnswer,
    Key(u32),
    Value(u32),
    Option(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_keys: u32,
    pub num_values: u32,
    pub num_options: u32,
}

impl Vocabulary {
    pub fn new(num_keys: u32, num_values: u32, num_options: u32) -> Self {
        Vocabulary { num_keys, num_values, num_options }
    }

    pub fn size(&self) -> usize {
        (FIXED + self.num_keys + self.num_values + self.num_options) as usize
    }

    pub fn key(&self, k: u32) -> TokenId {
        debug_assert!(k < self.num_keys);
        FIXED + k
    }

    pub fn value(&self, v: u32) -> TokenId {
        debug_assert!(v < self.num_values);
        FIXED + self.num_keys + v
    }

    pub fn option(&self, o: u32) -> TokenId {
        debug_assert!(o < self.num_options);
        FIXED + self.num_keys + self.num_values + o
    }

    pub fn symbol(&self, t: TokenId) -> Option<Symbol> {
        let s = match t {
            BOS => Symbol::Bos,
            ASK => Symbol::Ask,
            ANSWER => Symbol::Answer,
            EOT => Symbol::Eot,
            CANNOT_ANSWER => Symbol::CannotAnswer,
            t if t < FIXED + self.num_keys => Symbol::Key(t - FIXED),
            t if t < FIXED + self.num_keys + self.num_values => Symbol::Value(t - FIXED - self.num_keys),
            t if (t as usize) < self.size() => Symbol::Option(t - FIXED - self.num_keys - self.num_values),
            _ => return None,
        };
        Some(s)
    }

    pub fn contains(&self, t: TokenId) -> bool {
        (t as usize) < self.size()
    }
}
