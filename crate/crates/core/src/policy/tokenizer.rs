//! Closed-vocabulary tokenizers for the synthetic task.
//!
//! Two modes: whitespace-delimited words over a fixed word list, or raw bytes.
//! In both, pad/eos and the four think/answer tag strings are atomic tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("word {0:?} is not in the closed vocabulary")]
    UnknownWord(String),
    #[error("token id {0} is out of range")]
    UnknownId(u32),
    #[error("decoded bytes are not valid utf-8")]
    InvalidUtf8,
}

pub const SPECIAL_TOKENS: [&str; 6] =
    ["<pad>", "<eos>", "<think>", "</think>", "<answer>", "</answer>"];

const LABEL_WORDS: [&str; 3] = ["entailment", "neutral", "contradiction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Word,
    Byte,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Tokenizer {
    /// Word-level tokenizer over the given words plus specials and the three
    /// label words. Duplicates are dropped; non-special words are sorted.
    pub fn word_level<I: IntoIterator<Item = String>>(words: I) -> Tokenizer {
        let mut extra: Vec<String> = words
            .into_iter()
            .chain(LABEL_WORDS.iter().map(|s| s.to_string()))
            .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        extra.sort();
        extra.dedup();
        let vocab: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(extra).collect();
        Self::from_vocab(TokenizerMode::Word, vocab)
    }

    /// Byte-level tokenizer: specials first, then the 256 single-byte tokens.
    pub fn byte_level() -> Tokenizer {
        let vocab: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((0u16..256).map(|b| format!("byte:{b:02x}")))
            .collect();
        Self::from_vocab(TokenizerMode::Byte, vocab)
    }

    pub fn from_vocab(mode: TokenizerMode, vocab: Vec<String>) -> Tokenizer {
        let lookup =
            vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Tokenizer { mode, vocab, lookup }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        1
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    /// Stable identifier derived from the mode and full vocabulary.
    pub fn tokenizer_id(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.vocab {
            hasher.update(w.as_bytes());
            hasher.update([0x1f]);
        }
        let digest = hasher.finalize();
        let mode = match self.mode {
            TokenizerMode::Word => "word",
            TokenizerMode::Byte => "byte",
        };
        format!("{mode}-{:02x}{:02x}{:02x}{:02x}", digest[0], digest[1], digest[2], digest[3])
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        match self.mode {
            TokenizerMode::Word => text
                .split_whitespace()
                .map(|w| {
                    self.lookup
                        .get(w)
                        .copied()
                        .ok_or_else(|| TokenizerError::UnknownWord(w.to_string()))
                })
                .collect(),
            TokenizerMode::Byte => {
                let mut ids = Vec::new();
                let bytes = text.as_bytes();
                let mut i = 0;
                'outer: while i < bytes.len() {
                    for (sid, tag) in SPECIAL_TOKENS.iter().enumerate() {
                        if bytes[i..].starts_with(tag.as_bytes()) {
                            ids.push(sid as u32);
                            i += tag.len();
                            continue 'outer;
                        }
                    }
                    ids.push(SPECIAL_TOKENS.len() as u32 + bytes[i] as u32);
                    i += 1;
                }
                Ok(ids)
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        match self.mode {
            TokenizerMode::Word => {
                let mut words = Vec::with_capacity(ids.len());
                for &id in ids {
                    words.push(
                        self.vocab
                            .get(id as usize)
                            .ok_or(TokenizerError::UnknownId(id))?
                            .as_str(),
                    );
                }
                Ok(words.join(" "))
            }
            TokenizerMode::Byte => {
                let mut bytes = Vec::with_capacity(ids.len());
                for &id in ids {
                    let id = id as usize;
                    if id < SPECIAL_TOKENS.len() {
                        bytes.extend_from_slice(SPECIAL_TOKENS[id].as_bytes());
                    } else if id < self.vocab.len() {
                        bytes.push((id - SPECIAL_TOKENS.len()) as u8);
                    } else {
                        return Err(TokenizerError::UnknownId(id as u32));
                    }
                }
                String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
            }
        }
    }

    /// Decode a sampled completion for reward parsing: pad and eos dropped,
    /// tags kept.
    pub fn decode_completion(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let kept: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&id| id != self.pad_id() && id != self.eos_id())
            .collect();
        self.decode(&kept)
    }
}
