//! Word-level tokenizer over normalized captions. Ids: 0 = `<pad>`,
//! 1 = `<unk>`, then the vocabulary in sorted order — the mapping is a pure
//! function of the vocabulary set, independent of build order.

use std::collections::{BTreeSet, HashMap};

use crate::specmel::textnorm::normalize_text;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Words every tokenizer knows in addition to the corpus captions: the
/// reprogramming template literals and word banks (normalized forms), so
/// dynamically composed captions never degrade to `<unk>`.
const STATIC_LEXICON: &[&str] = &[
    // Template literals.
    "before", "of", ",", "in", "front", "first", "is", "second", "after", "behind", "then",
    "following", "later",
    // Verb bank (normalized to single tokens).
    "hearing", "noticing", "listening", "to", "appearing",
    // Adjective bank ("close-up" normalizes to "closeup").
    "clear", "noisy", "closeup", "weird", "clean",
    // Noun and quantifier banks.
    "audio", "sound", "voice", "a", "the", "some",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Build from caption texts; the static lexicon is always included.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<String> = STATIC_LEXICON.iter().map(|s| s.to_string()).collect();
        for c in captions {
            for tok in normalize_text(c).split_whitespace() {
                set.insert(tok.to_string());
            }
        }
        Self::from_words(set.into_iter().collect())
    }

    /// Reconstruct from an ordered word list (checkpoint load).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut ids = HashMap::with_capacity(words.len() + 2);
        for (i, w) in words.iter().enumerate() {
            ids.insert(w.clone(), i + 2);
        }
        Tokenizer { words, ids }
    }

    /// Vocabulary size including `<pad>` and `<unk>`.
    pub fn vocab_size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Normalize and encode; unknown words map to `<unk>`.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        normalize_text(caption)
            .split_whitespace()
            .map(|tok| self.ids.get(tok).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Encode, truncate to `len`, pad with `<pad>` to exactly `len`.
    pub fn encode_fixed(&self, caption: &str, len: usize) -> (Vec<usize>, usize) {
        let mut ids = self.encode(caption);
        ids.truncate(len);
        let real = ids.len();
        ids.resize(len, PAD_ID);
        (ids, real)
    }
}
