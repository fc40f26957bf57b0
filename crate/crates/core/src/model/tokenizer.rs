use crate::world::CONCEPT_NAMES;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const START: u32 = 2;
pub const END: u32 = 3;

const SPECIALS: [&str; 4] = ["[pad]", "[unk]", "[start]", "[end]"];

/// Words used by the caption and statement templates.
pub const TEMPLATE_WORDS: &[&str] = &[
    "a", "an", "photo", "of", "the", "and", "but", "not", "no", "without", "with", "on", "in",
    "near", "this", "image", "shows", "does", "show", "scene", "there", "is",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    /// Exactly `max_len` ids: start marker, words, end marker, then padding.
    pub ids: Vec<u32>,
    /// Number of non-padding positions (markers included).
    pub len: usize,
}

impl TokenSequence {
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.len]
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(max_len: usize) -> Self {
        assert!(max_len >= 2, "max_len must leave room for the markers");
        let vocab: Vec<String> = SPECIALS
            .iter()
            .chain(TEMPLATE_WORDS)
            .chain(CONCEPT_NAMES)
            .map(|s| s.to_string())
            .collect();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer {
            vocab,
            index,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    /// Lowercases, strips punctuation and maps unknown words to [`UNK`].
    /// Text longer than the window is truncated before the end marker.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(START);
        let words = text
            .split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty());
        for w in words.take(self.max_len - 2) {
            ids.push(self.id(&w));
        }
        ids.push(END);
        let len = ids.len();
        ids.resize(self.max_len, PAD);
        TokenSequence { ids, len }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_padded() {
        let t = Tokenizer::new(16);
        let a = t.tokenize("a photo of the dog but not of the cat");
        assert_eq!(a, t.tokenize("a photo of the dog but not of the cat"));
        assert_eq!(a.ids.len(), 16);
        assert_eq!(a.len, 12);
        assert_eq!(a.ids[0], START);
        assert_eq!(a.ids[11], END);
        assert!(a.ids[12..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn empty_text() {
        let t = Tokenizer::new(16);
        let s = t.tokenize("");
        assert_eq!(s.active(), &[START, END]);
        assert!(s.ids[2..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let t = Tokenizer::new(16);
        let s = t.tokenize("a photo of the xylophone");
        assert!(s.active().contains(&UNK));
        assert!(s.ids.iter().all(|&i| (i as usize) < t.vocab_size()));
    }

    #[test]
    fn case_and_punctuation_are_ignored() {
        let t = Tokenizer::new(16);
        assert_eq!(
            t.tokenize("This image shows the Dog."),
            t.tokenize("this image shows the dog")
        );
    }

    #[test]
    fn long_text_is_truncated() {
        let t = Tokenizer::new(8);
        let s = t.tokenize("a photo of the dog and the cat and the bird");
        assert_eq!(s.len, 8);
        assert_eq!(s.ids[7], END);
    }
}
