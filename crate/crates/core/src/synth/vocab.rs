use std::collections::HashMap;

use crate::error::{data, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIALS: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];
const FUNCTION_WORDS: [&str; 10] = ["a", "this", "is", "left", "right", "of", "above", "below", "and", "the"];

/// Closed word list with dense ids; the four specials come first.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn standard() -> Self {
        let words = SPECIALS
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .copied()
            .chain(super::Color::ALL.iter().map(|c| c.name()))
            .chain(super::ShapeKind::ALL.iter().map(|k| k.name()))
            .map(str::to_string)
            .collect::<Vec<_>>();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, ids }
    }

    /// The standard list followed by `extra` words not already present.
    pub fn with_words(extra: &[&str]) -> Self {
        let mut v = Self::standard();
        for w in extra {
            if v.id(w).is_none() {
                v.ids.insert(w.to_string(), v.words.len());
                v.words.push(w.to_string());
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

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Whitespace tokenization with exact word lookup.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| data(format!("word '{w}' is not in the vocabulary")))).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("[?]")).collect::<Vec<_>>().join(" ")
    }
}
