//! Word-level tokenizer over whitespace-split text. The vocabulary is sorted,
//! so two builds over the same corpora produce identical id maps.

use super::CorpusError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const ACT: u32 = 3;
pub const IMG: u32 = 4;
pub const UNK: u32 = 5;

pub const SPECIALS: [&str; 6] = ["<PAD>", "<BOS>", "<EOS>", "<ACT>", "<IMG>", "<UNK>"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer { words, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("<UNK>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds the vocabulary from corpus text. Specials take the first six ids,
/// then the corpus words in sorted order.
pub fn build_tokenizer<'a, I>(corpora: I) -> Result<Tokenizer, CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = BTreeSet::new();
    let mut any = false;
    for text in corpora {
        any = true;
        for w in text.split_whitespace() {
            if !SPECIALS.contains(&w) {
                seen.insert(w.to_string());
            }
        }
    }
    if !any {
        return Err(CorpusError::EmptyCorpora);
    }
    let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    words.extend(seen);
    Ok(Tokenizer::from_words(words))
}
