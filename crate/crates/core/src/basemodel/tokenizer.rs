use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// 256 byte values plus BOS and EOS.
pub const BYTE_VOCAB: usize = 258;

/// Byte-level tokenizer: every UTF-8 byte is a token.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// `BOS text EOS`.
    pub fn encode_document(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(text.bytes().map(u32::from));
        ids.push(EOS);
        ids
    }

    /// Specials are dropped; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Token ids, each below the vocabulary bound; never empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::data("empty token sequence"));
        }
        if ids.len() > max_len {
            return Err(Error::data(format!(
                "sequence of {} tokens exceeds the limit of {max_len}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::data(format!(
                "token {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Model input: every token but the last.
    pub fn inputs(&self) -> &[u32] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets aligned with [`TokenSequence::inputs`].
    pub fn targets(&self) -> &[u32] {
        &self.ids[1..]
    }
}
