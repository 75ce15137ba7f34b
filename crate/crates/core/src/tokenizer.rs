//! Whitespace tokenizer over a closed vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ids of one piece of text.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ids in range, no PAD before a non-PAD, EOS at most once.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&id) = self.0.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
        }
        if let Some(first_pad) = self.0.iter().position(|&id| id == PAD) {
            if self.0[first_pad..].iter().any(|&id| id != PAD) {
                return Err(Error::Dataset("PAD token precedes a non-PAD token".into()));
            }
        }
        if self.0.iter().filter(|&&id| id == EOS).count() > 1 {
            return Err(Error::Dataset("more than one EOS token".into()));
        }
        Ok(())
    }

    /// Copy with a trailing EOS.
    pub fn with_eos(&self) -> Vec<u32> {
        let mut v = self.0.clone();
        v.push(EOS);
        v
    }
}

/// Lowercases, splits on whitespace and detaches punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                words.push(core::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                words.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Special tokens first, then every distinct word of `texts` in sorted order.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut distinct = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                distinct.insert(w, ());
            }
        }
        Self::from_words(distinct.into_keys())
    }

    /// Special tokens followed by `words`; duplicates of earlier entries are skipped.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        for w in SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(split_words(text).iter().map(|w| self.id(w)).collect())
    }

    /// Space-joined words; PAD/BOS/EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }
}
