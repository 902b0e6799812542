//! Vocabulary and tokenization.
//!
//! The engine speaks a tiny closed language: color and shape words, a few
//! filler/relation words, and two special tokens. Prompts are padded to a
//! fixed length of [`MAX_TOKENS`] positions: `[SoT]`, the caption words,
//! then `[EoT]` repeated to the end. The token spans recorded here drive
//! both guidance target resolution (word positions, the `[EoT]` padding
//! span) and the padding-token experiments.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

/// Fixed prompt length N, including `[SoT]` and `[EoT]` padding.
pub const MAX_TOKENS: usize = 16;
/// Token id of the start marker, always at position 0.
pub const SOT_ID: usize = 0;
/// Token id of the end/padding marker.
pub const EOT_ID: usize = 1;

/// Words the base engine understands, in id order after the special tokens.
const CORE_WORDS: &[&str] = &[
    "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "to", "the", "left",
    "right", "of", "above", "below", "photo",
];

/// Closed word list with id lookup. The base vocabulary is fixed; concept
/// inversion may append new symbols (e.g. `<*>`), whose embeddings then live
/// outside the encoder's embedding table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The built-in vocabulary: `[SoT]`, `[EoT]`, then [`CORE_WORDS`].
    pub fn core() -> Self {
        let mut words = vec!["[SoT]".to_string(), "[EoT]".to_string()];
        words.extend(CORE_WORDS.iter().map(|w| w.to_string()));
        Self::from_words(words)
    }

    /// Rebuilds a vocabulary from an explicit word list (checkpoint load).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    /// Restores the lookup index after serde deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    /// Appends a new word, returning its id; re-adding returns the old id.
    pub fn add_word(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Splits a caption on whitespace, lowercases plain words, and produces
    /// the fixed-length id sequence. Special `<...>` symbols (concept
    /// tokens) are matched verbatim.
    pub fn tokenize(&self, caption: &str) -> Result<TokenizedPrompt> {
        let mut ids = Vec::with_capacity(MAX_TOKENS);
        ids.push(SOT_ID);
        for raw in caption.split_whitespace() {
            let word = if raw.starts_with('<') {
                raw.to_string()
            } else {
                raw.to_lowercase()
            };
            let id = self
                .id(&word)
                .ok_or_else(|| Error::invalid(format!("unknown word in caption: {raw:?}")))?;
            ids.push(id);
            if ids.len() > MAX_TOKENS - 1 {
                return Err(Error::invalid(format!(
                    "caption too long: more than {} words",
                    MAX_TOKENS - 2
                )));
            }
        }
        let word_span = 1..ids.len();
        let eot_span = ids.len()..MAX_TOKENS;
        ids.resize(MAX_TOKENS, EOT_ID);
        Ok(TokenizedPrompt {
            ids,
            word_span,
            eot_span,
        })
    }
}

/// A caption rendered to the fixed prompt layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    /// Exactly [`MAX_TOKENS`] ids: `[SoT]`, words, `[EoT]` padding.
    pub ids: Vec<usize>,
    /// Positions holding caption words (empty for the empty caption).
    pub word_span: Range<usize>,
    /// Positions holding `[EoT]` padding (always non-empty).
    pub eot_span: Range<usize>,
}

impl TokenizedPrompt {
    /// The unconditional prompt: `[SoT]` followed by `[EoT]` padding only.
    pub fn empty() -> Self {
        let mut ids = vec![EOT_ID; MAX_TOKENS];
        ids[0] = SOT_ID;
        TokenizedPrompt {
            ids,
            word_span: 1..1,
            eot_span: 1..MAX_TOKENS,
        }
    }

    /// All positions whose token id equals `id`.
    pub fn positions_of(&self, id: usize) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == id)
            .map(|(p, _)| p)
            .collect()
    }

    /// Number of real caption words.
    pub fn word_count(&self) -> usize {
        self.word_span.len()
    }
}
