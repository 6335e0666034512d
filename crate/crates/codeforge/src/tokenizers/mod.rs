//! Token codecs: character-level 1-of-k and byte-level BPE.
//!
//! Both codecs map text to integer id sequences and back. The character
//! codec indexes the one-hot input dimension of the recurrent LM; the BPE
//! codec feeds the transformer LM. A codec serializes to a small JSON
//! manifest (`type` plus either the character set or the merge list in
//! training order).

mod bpe;
mod chars;

pub use bpe::BpeModel;
pub use chars::{CharVocab, UnknownCharPolicy};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Either codec, behind one encode/decode surface.
#[derive(Debug, Clone)]
pub enum TokenCodec {
    Char(CharVocab),
    Bpe(BpeModel),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum CodecManifest {
    Char { chars: String },
    Bpe { merges: Vec<(Vec<u8>, Vec<u8>)> },
}

impl TokenCodec {
    pub fn vocab_size(&self) -> usize {
        match self {
            TokenCodec::Char(v) => v.len(),
            TokenCodec::Bpe(m) => m.vocab_size(),
        }
    }

    /// Encodes text. The character codec fails on out-of-vocabulary
    /// characters; use [`TokenCodec::encode_with_policy`] for a fallback.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.encode_with_policy(text, UnknownCharPolicy::Fail)
    }

    /// Encodes with an explicit unknown-character policy. Byte-level BPE
    /// has no unknown path, so the policy only affects the char codec.
    pub fn encode_with_policy(&self, text: &str, policy: UnknownCharPolicy) -> Result<Vec<u32>> {
        match self {
            TokenCodec::Char(v) => v.encode_with_policy(text, policy),
            TokenCodec::Bpe(m) => Ok(m.encode(text)),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            TokenCodec::Char(v) => v.decode(ids),
            TokenCodec::Bpe(m) => m.decode(ids),
        }
    }

    /// Decode that tolerates byte sequences cut mid-codepoint (possible
    /// while sampling BPE ids): invalid ranges become replacement chars.
    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String> {
        match self {
            TokenCodec::Char(v) => v.decode(ids),
            TokenCodec::Bpe(m) => Ok(String::from_utf8_lossy(&m.decode_bytes(ids)?).into_owned()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let manifest = match self {
            TokenCodec::Char(v) => CodecManifest::Char {
                chars: v.chars().iter().collect(),
            },
            TokenCodec::Bpe(m) => CodecManifest::Bpe {
                merges: m.merges().to_vec(),
            },
        };
        Ok(serde_json::to_string_pretty(&manifest)?)
    }

    pub fn to_value(&self) -> Result<serde_json::Value> {
        let manifest = match self {
            TokenCodec::Char(v) => CodecManifest::Char {
                chars: v.chars().iter().collect(),
            },
            TokenCodec::Bpe(m) => CodecManifest::Bpe {
                merges: m.merges().to_vec(),
            },
        };
        Ok(serde_json::to_value(&manifest)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_manifest(serde_json::from_str(json)?)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        Self::from_manifest(serde_json::from_value(value)?)
    }

    fn from_manifest(manifest: CodecManifest) -> Result<Self> {
        match manifest {
            CodecManifest::Char { chars } => Ok(TokenCodec::Char(CharVocab::from_chars(chars.chars())?)),
            CodecManifest::Bpe { merges } => Ok(TokenCodec::Bpe(BpeModel::from_merges(merges)?)),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }
}

/// Splits text into `code_tokens`-style word tokens: maximal runs of
/// alphanumerics/underscores, plus every punctuation character as its own
/// token. Whitespace only separates.
pub fn split_code_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Word-level vocabulary for the retrieval encoders, built over the
/// corpus `code_tokens`/`docstring_tokens` fields. Id 0 is reserved for
/// out-of-vocabulary tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

pub const UNK_ID: u32 = 0;

impl WordVocab {
    /// Builds a vocabulary of at most `max_size` entries (including the
    /// unknown token) from the given tokens, keeping the most frequent
    /// ones; frequency ties break toward the lexicographically smaller
    /// token.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(1).min(ranked.len());

        let mut tokens = Vec::with_capacity(keep + 1);
        tokens.push("<unk>".to_string());
        tokens.extend(ranked[..keep].iter().map(|(t, _)| t.to_string()));
        let index = Self::build_index(&tokens);
        WordVocab { tokens, index }
    }

    fn build_index(tokens: &[String]) -> HashMap<String, u32> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect()
    }

    /// Restores the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = Self::build_index(&self.tokens);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}
