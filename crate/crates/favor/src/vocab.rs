//! Token vocabulary for generated responses.
//!
//! The vocabulary is laid out in a fixed order: the four structural tags,
//! an end-of-sequence marker, the ten decimal digits, and a configurable
//! filler alphabet used for free-form "thinking" content. Tags are single
//! tokens; their surface strings are the literal `<think>`-style markers
//! that the response parser recognizes.

use crate::error::{Error, Result};

/// Index of a token in a [`Vocabulary`].
pub type TokenId = usize;

const RESERVED: usize = 5;
const DIGITS: usize = 10;
/// Smallest legal vocabulary: tags + EOS + digits, no filler.
pub const MIN_VOCAB_SIZE: usize = RESERVED + DIGITS;
const MAX_FILLER: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    filler_count: usize,
}

impl Vocabulary {
    pub const THINK_OPEN: TokenId = 0;
    pub const THINK_CLOSE: TokenId = 1;
    pub const ANSWER_OPEN: TokenId = 2;
    pub const ANSWER_CLOSE: TokenId = 3;
    pub const EOS: TokenId = 4;

    /// Builds a vocabulary with `filler_count` single-letter filler tokens
    /// (`a`, `b`, ...). At most 26 are supported.
    pub fn new(filler_count: usize) -> Result<Self> {
        if filler_count > MAX_FILLER {
            return Err(Error::Contract(format!(
                "filler_count {filler_count} exceeds the {MAX_FILLER}-letter alphabet"
            )));
        }
        let mut surfaces = vec![
            "<think>".to_string(),
            "</think>".to_string(),
            "<answer>".to_string(),
            "</answer>".to_string(),
            "<eos>".to_string(),
        ];
        for d in 0..DIGITS {
            surfaces.push(d.to_string());
        }
        for i in 0..filler_count {
            surfaces.push(((b'a' + i as u8) as char).to_string());
        }
        Ok(Self {
            surfaces,
            filler_count,
        })
    }

    /// Reconstructs the vocabulary that has the given total size.
    pub fn with_size(size: usize) -> Result<Self> {
        if size < MIN_VOCAB_SIZE {
            return Err(Error::Contract(format!(
                "vocabulary size {size} is below the minimum {MIN_VOCAB_SIZE}"
            )));
        }
        Self::new(size - MIN_VOCAB_SIZE)
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn filler_count(&self) -> usize {
        self.filler_count
    }

    /// Token for decimal digit `d` (0-9).
    pub fn digit(&self, d: usize) -> Result<TokenId> {
        if d >= DIGITS {
            return Err(Error::Contract(format!("{d} is not a decimal digit")));
        }
        Ok(RESERVED + d)
    }

    /// The i-th filler token.
    pub fn filler(&self, i: usize) -> Result<TokenId> {
        if i >= self.filler_count {
            return Err(Error::Contract(format!(
                "filler index {i} out of range ({} available)",
                self.filler_count
            )));
        }
        Ok(MIN_VOCAB_SIZE + i)
    }

    /// Digit tokens spelling `value` in decimal, most significant first.
    pub fn digits_of(&self, value: usize) -> Vec<TokenId> {
        value
            .to_string()
            .bytes()
            .map(|b| RESERVED + (b - b'0') as usize)
            .collect()
    }

    /// Canonical surface string of a token. Every token has a distinct
    /// surface; rendering treats EOS specially (see `reward::render`).
    pub fn surface(&self, id: TokenId) -> Result<&str> {
        self.surfaces
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Contract(format!("token id {id} out of vocabulary")))
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id < self.surfaces.len()
    }
}

impl Default for Vocabulary {
    /// Default vocabulary: 8 filler letters, 23 tokens total.
    fn default() -> Self {
        Self::new(8).expect("default filler count is valid")
    }
}
