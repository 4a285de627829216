use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::lm::TokenId;

/// Reserved tokens. Their ids are fixed and precede the base alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    System,
    User,
    Assistant,
    EndOfTurn,
    /// Preamble of the reasoning (student) format.
    ReasoningMode,
    /// Preamble of the teaching (teacher) format.
    TeachingMode,
    BeginThought,
    EndThought,
    BeginSolution,
    EndSolution,
    BeginExplanation,
    EndExplanation,
}

impl Special {
    pub const ALL: [Special; 13] = [
        Special::Pad,
        Special::System,
        Special::User,
        Special::Assistant,
        Special::EndOfTurn,
        Special::ReasoningMode,
        Special::TeachingMode,
        Special::BeginThought,
        Special::EndThought,
        Special::BeginSolution,
        Special::EndSolution,
        Special::BeginExplanation,
        Special::EndExplanation,
    ];

    pub const COUNT: usize = Self::ALL.len();

    #[inline]
    pub const fn id(self) -> TokenId {
        self as TokenId
    }

    pub fn from_id(id: TokenId) -> Option<Special> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn text(self) -> &'static str {
        match self {
            Special::Pad => "<|pad|>",
            Special::System => "<|system|>",
            Special::User => "<|user|>",
            Special::Assistant => "<|assistant|>",
            Special::EndOfTurn => "<|im_end|>",
            Special::ReasoningMode => "<|reasoning_mode|>",
            Special::TeachingMode => "<|teaching_mode|>",
            Special::BeginThought => "<|begin_of_thought|>",
            Special::EndThought => "<|end_of_thought|>",
            Special::BeginSolution => "<|begin_of_solution|>",
            Special::EndSolution => "<|end_of_solution|>",
            Special::BeginExplanation => "<|begin_of_explanation|>",
            Special::EndExplanation => "<|end_of_explanation|>",
        }
    }
}

pub const PAD: TokenId = Special::Pad.id();
pub const SYSTEM: TokenId = Special::System.id();
pub const USER: TokenId = Special::User.id();
pub const ASSISTANT: TokenId = Special::Assistant.id();
pub const END_OF_TURN: TokenId = Special::EndOfTurn.id();
pub const REASONING_MODE: TokenId = Special::ReasoningMode.id();
pub const TEACHING_MODE: TokenId = Special::TeachingMode.id();
pub const BEGIN_THOUGHT: TokenId = Special::BeginThought.id();
pub const END_THOUGHT: TokenId = Special::EndThought.id();
pub const BEGIN_SOLUTION: TokenId = Special::BeginSolution.id();
pub const END_SOLUTION: TokenId = Special::EndSolution.id();
pub const BEGIN_EXPLANATION: TokenId = Special::BeginExplanation.id();
pub const END_EXPLANATION: TokenId = Special::EndExplanation.id();

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < Special::COUNT
}

/// Default base alphabet: digits, lowercase letters, space and the
/// punctuation used by the task families.
pub const BASE_ALPHABET: &str = "0123456789abcdefghijklmnopqrstuvwxyz +-*/()=?,.;:<>&~#%_|";

/// Character-level tokenizer over a fixed alphabet plus reserved specials.
///
/// Every base character maps to exactly one token, so tokenization is
/// context-free: tokenizing two strings separately and concatenating gives
/// the same ids as tokenizing their concatenation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    alphabet: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        Self::with_alphabet(BASE_ALPHABET).expect("default alphabet has no duplicates")
    }

    pub fn with_alphabet(alphabet: &str) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        let mut index = HashMap::new();
        for (i, &c) in alphabet.iter().enumerate() {
            if index
                .insert(c, (Special::COUNT + i) as TokenId)
                .is_some()
            {
                return Err(Error::InvalidConfig(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Self { alphabet, index })
    }

    pub fn size(&self) -> usize {
        Special::COUNT + self.alphabet.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::TokenError(c.to_string()))
            })
            .collect()
    }

    /// Non-empty text only; empty input is a [`Error::TokenError`].
    pub fn tokenize_nonempty(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.is_empty() {
            return Err(Error::TokenError(String::new()));
        }
        self.tokenize(text)
    }

    pub fn token_text(&self, id: TokenId) -> String {
        match Special::from_id(id) {
            Some(s) => s.text().to_string(),
            None => self
                .alphabet
                .get(id as usize - Special::COUNT)
                .map(|c| c.to_string())
                .unwrap_or_else(|| format!("<|unk:{id}|>")),
        }
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token_text(id)).collect()
    }

    /// Short fingerprint used to tie checkpoints to a tokenizer.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let text: String = self.alphabet.iter().collect();
        let digest = Sha256::digest(format!("{}|{}", Special::COUNT, text).as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_never_produced_from_text() {
        let v = Vocabulary::standard();
        let ids = v.tokenize(BASE_ALPHABET).unwrap();
        assert!(ids.iter().all(|&id| !is_special(id)));
        // Tag spellings tokenize as ordinary characters, or fail.
        assert!(v.tokenize("<|begin_of_thought|>").is_ok_and(|ids| ids.iter().all(|&i| !is_special(i))));
    }

    #[test]
    fn round_trips_base_text() {
        let v = Vocabulary::standard();
        let s = "((3+4)*2) mod 10 = ?";
        assert_eq!(v.detokenize(&v.tokenize(s).unwrap()), s);
    }

    #[test]
    fn rejects_unknown_characters() {
        let v = Vocabulary::standard();
        assert!(matches!(v.tokenize("3 ÷ 4"), Err(Error::TokenError(_))));
        assert!(matches!(v.tokenize("ABC"), Err(Error::TokenError(_))));
        assert!(matches!(v.tokenize_nonempty(""), Err(Error::TokenError(_))));
    }

    #[test]
    fn duplicate_alphabet_is_rejected() {
        assert!(Vocabulary::with_alphabet("abca").is_err());
    }
}
