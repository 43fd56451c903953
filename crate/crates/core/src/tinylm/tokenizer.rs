use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{BYTE_VOCAB_SIZE, EOS_TOKEN};
use crate::error::{Error, Result};

/// JSON vocabulary file: token strings indexed by id plus the EOS id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: Vec<String>,
    pub eos: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    /// Raw UTF-8 bytes, ids 0..256, EOS = 256.
    Bytes,
    /// Greedy longest-match over a supplied vocabulary.
    Vocab(VocabFile),
}

impl Tokenizer {
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let vocab: VocabFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if vocab.eos as usize >= vocab.tokens.len() {
            return Err(Error::Input(format!(
                "eos id {} outside vocabulary of {}",
                vocab.eos,
                vocab.tokens.len()
            )));
        }
        Ok(Self::Vocab(vocab))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Bytes => BYTE_VOCAB_SIZE,
            Self::Vocab(v) => v.tokens.len(),
        }
    }

    pub fn eos(&self) -> u32 {
        match self {
            Self::Bytes => EOS_TOKEN,
            Self::Vocab(v) => v.eos,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Self::Bytes => Ok(text.bytes().map(u32::from).collect()),
            Self::Vocab(v) => {
                let mut out = Vec::new();
                let mut rest = text;
                while !rest.is_empty() {
                    let best = v
                        .tokens
                        .iter()
                        .enumerate()
                        .filter(|(i, t)| *i as u32 != v.eos && !t.is_empty() && rest.starts_with(t.as_str()))
                        .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)));
                    match best {
                        Some((i, t)) => {
                            out.push(i as u32);
                            rest = &rest[t.len()..];
                        }
                        None => {
                            return Err(Error::Input(format!(
                                "no vocabulary entry matches {:?}",
                                rest.chars().next().expect("non-empty")
                            )))
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        match self {
            Self::Bytes => {
                let bytes: Vec<u8> = tokens
                    .iter()
                    .filter_map(|&t| u8::try_from(t).ok())
                    .collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Self::Vocab(v) => tokens
                .iter()
                .filter(|&&t| t != v.eos)
                .filter_map(|&t| v.tokens.get(t as usize).map(String::as_str))
                .collect(),
        }
    }
}
