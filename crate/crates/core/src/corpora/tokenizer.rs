use std::collections::HashMap;

use super::CorpusError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const N_SPECIAL: usize = 3;

const ALPHABET: &str = concat!(
    "0123456789",
    "abcdefghijklmnopqrstuvwxyz",
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    " \n",
    "()+-*=;:?.,!'\"`_[]{}<>/%#$&|^~@\\"
);

/// Character-level tokenizer over a fixed alphabet plus PAD/BOS/EOS.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let chars: Vec<char> = ALPHABET.chars().collect();
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i + N_SPECIAL)).collect();
        Self { chars, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + N_SPECIAL
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn digit(&self, d: u32) -> usize {
        self.id(char::from_digit(d, 10).expect("single digit")).expect("digits are in the alphabet")
    }

    /// Ids of the ten digit characters, `0` through `9`.
    pub fn digit_ids(&self) -> Vec<usize> {
        (0..10).map(|d| self.digit(d)).collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        text.chars()
            .enumerate()
            .map(|(pos, c)| self.id(c).ok_or(CorpusError::UnknownChar { ch: c, pos }))
            .collect()
    }

    /// Inverse of `tokenize`; special ids are rejected.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String, CorpusError> {
        ids.iter()
            .map(|&id| match id.checked_sub(N_SPECIAL).and_then(|i| self.chars.get(i)) {
                Some(&c) => Ok(c),
                None => Err(CorpusError::SpecialToken(id)),
            })
            .collect()
    }

    /// Like `detokenize` but drops special and out-of-range ids.
    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| id.checked_sub(N_SPECIAL).and_then(|i| self.chars.get(i))).collect()
    }
}
