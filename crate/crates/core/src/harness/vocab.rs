use std::collections::HashMap;

use crate::encoders::TextBatch;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];

const WORDS: [&str; 35] = [
    "a", "an", "the", "photo", "of", "and", "with", "image", "showing", "there", "is", "picture", "scene",
    "containing", "has", "left", "right", "to", "on", "small", "large", "that", "one", "shape", "shapes",
    "in", "two", "three", "above", "below", "next", "some", "colored", "objects", "are",
];

/// Closed word-level vocabulary of the synthetic grammar.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let words: Vec<String> = ["<pad>", "<eos>"]
            .into_iter()
            .chain(WORDS)
            .chain(COLORS)
            .chain(SHAPES)
            .map(String::from)
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Word ids followed by the end token.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            let w = w.trim_matches(|c: char| c.is_ascii_punctuation());
            if w.is_empty() {
                continue;
            }
            match self.index.get(w) {
                Some(&id) => ids.push(id),
                None => return Err(Error::contract(format!("word {w:?} is not in the vocabulary"))),
            }
        }
        if ids.is_empty() {
            return Err(Error::contract("cannot encode an empty string"));
        }
        ids.push(EOS);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != EOS)
            .map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Encodes `texts` into a batch padded to the longest of them.
    pub fn batch(&self, texts: &[&str], max_len: usize) -> Result<TextBatch> {
        let seqs = texts.iter().map(|t| self.encode(t)).collect::<Result<Vec<_>>>()?;
        let width = seqs.iter().map(Vec::len).max().unwrap_or(1);
        if width > max_len {
            return Err(Error::contract(format!("text of {width} tokens exceeds text_len {max_len}")));
        }
        TextBatch::from_sequences(&seqs, width, PAD)
    }
}
