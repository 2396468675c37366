//! Character vocabulary and fixed-length sequence encoding.
//!
//! Character ids are dense in `[0, |characters|)`; `[MASK]` and `[PAD]` are
//! appended after them. Sequences are always exactly `L` tokens long and text
//! shorter than `L` is suffix-padded with `[PAD]`, which the decoder predicts
//! like any other token (it cannot insert or delete positions).

use std::collections::HashMap;
use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Rendering of `[MASK]` in decoded strings and traces.
pub const MASK_GLYPH: &str = "␣M";

pub const LOWERCASE: &str = "abcdefghijklmnopqrstuvwxyz";

/// The 94 printable ASCII symbols `'!'..='~'`.
pub fn printable_ascii() -> String {
    ('!'..='~').collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    characters: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    pub fn new(charset: &str) -> Result<Self> {
        let characters: Vec<char> = charset.chars().collect();
        if characters.is_empty() {
            return Err(Error::EmptyCharset);
        }
        let mut index = HashMap::with_capacity(characters.len());
        for (i, &c) in characters.iter().enumerate() {
            if index.insert(c, i as TokenId).is_some() {
                return Err(Error::DuplicateSymbol(c));
            }
        }
        Ok(Self { characters, index })
    }

    pub fn lowercase() -> Self {
        Self::new(LOWERCASE).expect("bundled charset is valid")
    }

    pub fn characters(&self) -> &[char] {
        &self.characters
    }

    pub fn charset(&self) -> String {
        self.characters.iter().collect()
    }

    /// Number of real characters, excluding specials.
    pub fn num_chars(&self) -> usize {
        self.characters.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.characters.len() as TokenId
    }

    pub fn pad_id(&self) -> TokenId {
        self.characters.len() as TokenId + 1
    }

    /// Total token count including `[MASK]` and `[PAD]`.
    pub fn size(&self) -> usize {
        self.characters.len() + 2
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<char> {
        self.characters.get(id as usize).copied()
    }

    pub fn is_char(&self, id: TokenId) -> bool {
        (id as usize) < self.characters.len()
    }

    pub fn encode(&self, text: &str, len: usize) -> Result<TokenSeq> {
        let n = text.chars().count();
        if n > len {
            return Err(Error::TooLong { len: n, max: len });
        }
        let mut ids = Vec::with_capacity(len);
        for c in text.chars() {
            ids.push(self.id(c).ok_or(Error::UnknownSymbol(c))?);
        }
        ids.resize(len, self.pad_id());
        Ok(TokenSeq(ids))
    }

    /// Characters up to the first `[PAD]`. `[MASK]` renders as [`MASK_GLYPH`];
    /// ids outside the vocabulary render as `?`.
    pub fn decode(&self, seq: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in seq {
            if id == self.pad_id() {
                break;
            }
            if id == self.mask_id() {
                out.push_str(MASK_GLYPH);
            } else {
                out.push(self.symbol(id).unwrap_or('?'));
            }
        }
        out
    }

    /// Checks the canonical ground-truth form: ids in range and PAD only as a suffix.
    pub fn is_canonical(&self, seq: &[TokenId]) -> bool {
        let mut seen_pad = false;
        for &id in seq {
            if id as usize >= self.size() || id == self.mask_id() {
                return false;
            }
            if id == self.pad_id() {
                seen_pad = true;
            } else if seen_pad {
                return false;
            }
        }
        true
    }
}

/// A fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn filled(len: usize, id: TokenId) -> Self {
        Self(vec![id; len])
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl DerefMut for TokenSeq {
    fn deref_mut(&mut self) -> &mut [TokenId] {
        &mut self.0
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}
