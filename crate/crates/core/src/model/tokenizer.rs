use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Newline doubles as the end-of-answer marker during generation.
pub const END_OF_ANSWER: u32 = b'\n' as u32;

/// A sequence of token ids. With the byte-level tokenizer ids are byte values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
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

    pub fn slice(&self, r: Range<usize>) -> TokenSeq {
        TokenSeq(self.0[r].to_vec())
    }

    pub fn concat(parts: &[&TokenSeq]) -> TokenSeq {
        TokenSeq(parts.iter().flat_map(|p| p.0.iter().copied()).collect())
    }

    pub fn push(&mut self, id: u32) {
        self.0.push(id);
    }

    pub fn extend(&mut self, other: &TokenSeq) {
        self.0.extend_from_slice(&other.0);
    }

    pub fn max_id(&self) -> Option<u32> {
        self.0.iter().copied().max()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

pub fn encode(text: &[u8]) -> TokenSeq {
    TokenSeq(text.iter().map(|&b| b as u32).collect())
}

pub fn encode_str(text: &str) -> TokenSeq {
    encode(text.as_bytes())
}

/// Inverse of [`encode`]. Ids above 255 cannot come from the byte tokenizer
/// and are mapped to `?`.
pub fn decode(tokens: &TokenSeq) -> Vec<u8> {
    tokens
        .0
        .iter()
        .map(|&id| u8::try_from(id).unwrap_or(b'?'))
        .collect()
}

pub fn decode_lossy(tokens: &TokenSeq) -> String {
    String::from_utf8_lossy(&decode(tokens)).into_owned()
}
