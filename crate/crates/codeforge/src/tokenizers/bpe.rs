//! Byte-level byte-pair encoding, GPT-2 style.
//!
//! The base alphabet is the 256 byte values, so every byte string encodes
//! without an unknown-token path and `decode(encode(t)) == t` for
//! arbitrary input. Text is pre-segmented into runs of whitespace and
//! runs of non-whitespace; merges never cross segment boundaries.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

const BASE_VOCAB: usize = 256;

/// A trained BPE model: the merge list in training order plus the
/// derived token tables.
#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    token_bytes: Vec<Vec<u8>>,
    // (left id, right id) -> (merge rank, merged id)
    rules: HashMap<(u32, u32), (u32, u32)>,
}

impl BpeModel {
    /// Trains a model on raw bytes, greedily merging the most frequent
    /// adjacent token pair until the vocabulary reaches
    /// `target_vocab_size` or no pair occurs at least twice. Frequency
    /// ties break toward the lexicographically smaller (left, right)
    /// byte-string pair.
    pub fn train(corpus: &[u8], target_vocab_size: usize) -> Result<Self> {
        if target_vocab_size < BASE_VOCAB + 1 {
            return Err(Error::Config(format!(
                "BPE target vocab size must be at least {}, got {}",
                BASE_VOCAB + 1,
                target_vocab_size
            )));
        }

        let mut token_bytes: Vec<Vec<u8>> = (0..BASE_VOCAB as u32).map(|b| vec![b as u8]).collect();
        let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();

        let mut segments: Vec<Vec<u32>> = split_segments(corpus)
            .into_iter()
            .map(|seg| seg.iter().map(|&b| b as u32).collect())
            .collect();

        // Pair counts plus, per pair, the set of segments it occurs in.
        // Membership may go stale after merges elsewhere; recounting the
        // touched segment keeps the counts themselves exact.
        let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut homes: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
        for (si, seg) in segments.iter().enumerate() {
            for w in seg.windows(2) {
                let pair = (w[0], w[1]);
                *counts.entry(pair).or_insert(0) += 1;
                homes.entry(pair).or_default().insert(si);
            }
        }

        while token_bytes.len() < target_vocab_size {
            let best = counts
                .iter()
                .filter(|&(_, &c)| c >= 2)
                .max_by(|a, b| {
                    a.1.cmp(b.1)
                        .then_with(|| {
                            let ka = (&token_bytes[a.0 .0 as usize], &token_bytes[a.0 .1 as usize]);
                            let kb = (&token_bytes[b.0 .0 as usize], &token_bytes[b.0 .1 as usize]);
                            kb.cmp(&ka)
                        })
                        // Distinct id pairs can share byte strings; break the
                        // residual tie on ids so selection never depends on
                        // map iteration order.
                        .then_with(|| b.0.cmp(a.0))
                })
                .map(|(&pair, _)| pair);
            let Some(pair) = best else { break };

            let new_id = token_bytes.len() as u32;
            let mut merged = token_bytes[pair.0 as usize].clone();
            merged.extend_from_slice(&token_bytes[pair.1 as usize]);
            merges.push((
                token_bytes[pair.0 as usize].clone(),
                token_bytes[pair.1 as usize].clone(),
            ));
            token_bytes.push(merged);

            let touched = homes.remove(&pair).unwrap_or_default();
            for si in touched {
                let seg = &mut segments[si];
                for w in seg.windows(2) {
                    let p = (w[0], w[1]);
                    if let Some(c) = counts.get_mut(&p) {
                        *c -= 1;
                    }
                }
                merge_in_place(seg, pair, new_id);
                for w in seg.windows(2) {
                    let p = (w[0], w[1]);
                    *counts.entry(p).or_insert(0) += 1;
                    homes.entry(p).or_default().insert(si);
                }
            }
            counts.remove(&pair);
        }

        Ok(Self::assemble(merges, token_bytes))
    }

    /// Rebuilds a model from a merge list, validating that each merge's
    /// parts exist earlier in the vocabulary.
    pub fn from_merges(merges: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..BASE_VOCAB as u32).map(|b| vec![b as u8]).collect();
        let mut ids: HashMap<Vec<u8>, u32> = token_bytes
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for (left, right) in &merges {
            if !ids.contains_key(left) || !ids.contains_key(right) {
                return Err(Error::Codec(format!(
                    "merge ({left:?}, {right:?}) references tokens not yet in the vocabulary"
                )));
            }
            let mut merged = left.clone();
            merged.extend_from_slice(right);
            ids.insert(merged.clone(), token_bytes.len() as u32);
            token_bytes.push(merged);
        }
        Ok(Self::assemble(merges, token_bytes))
    }

    fn assemble(merges: Vec<(Vec<u8>, Vec<u8>)>, token_bytes: Vec<Vec<u8>>) -> Self {
        let ids: HashMap<&[u8], u32> = token_bytes
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i as u32))
            .collect();
        let mut rules = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let merged_id = (BASE_VOCAB + rank) as u32;
            rules.insert(
                (ids[left.as_slice()], ids[right.as_slice()]),
                (rank as u32, merged_id),
            );
        }
        BpeModel {
            merges,
            token_bytes,
            rules,
        }
    }

    /// A copy of this model keeping only the first `k` merges. Useful for
    /// studying compression as a function of merge count.
    pub fn truncate_merges(&self, k: usize) -> Self {
        let merges: Vec<_> = self.merges.iter().take(k).cloned().collect();
        Self::from_merges(merges).expect("prefix of a valid merge list is valid")
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(|t| t.as_slice())
    }

    /// Encodes arbitrary text. Within each segment, applicable merges are
    /// applied in training order, all occurrences left to right.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        for seg in split_segments(bytes) {
            let mut toks: Vec<u32> = seg.iter().map(|&b| b as u32).collect();
            loop {
                let mut best: Option<(u32, (u32, u32), u32)> = None;
                for w in toks.windows(2) {
                    if let Some(&(rank, merged)) = self.rules.get(&(w[0], w[1])) {
                        if best.is_none_or(|(r, _, _)| rank < r) {
                            best = Some((rank, (w[0], w[1]), merged));
                        }
                    }
                }
                match best {
                    Some((_, pair, merged)) => merge_in_place(&mut toks, pair, merged),
                    None => break,
                }
            }
            out.extend_from_slice(&toks);
        }
        out
    }

    /// Decodes ids to raw bytes. Unknown ids are errors.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token_bytes.get(id as usize).ok_or(Error::UnknownId {
                id,
                vocab: self.token_bytes.len(),
            })?;
            bytes.extend_from_slice(tok);
        }
        Ok(bytes)
    }

    /// Decodes ids back to text. Unknown ids and byte sequences that are
    /// not valid UTF-8 are errors.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::Codec(format!("decoded bytes are not UTF-8: {e}")))
    }
}

/// Replaces every adjacent (left, right) occurrence with `merged`,
/// scanning left to right without overlap reuse.
fn merge_in_place(toks: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < toks.len() {
        if read + 1 < toks.len() && toks[read] == pair.0 && toks[read + 1] == pair.1 {
            toks[write] = merged;
            read += 2;
        } else {
            toks[write] = toks[read];
            read += 1;
        }
        write += 1;
    }
    toks.truncate(write);
}

/// Splits bytes into maximal runs of ASCII whitespace and runs of
/// everything else, preserving order and content.
fn split_segments(bytes: &[u8]) -> Vec<&[u8]> {
    let mut segments = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        let ws = bytes[start].is_ascii_whitespace();
        let mut end = start + 1;
        while end < bytes.len() && bytes[end].is_ascii_whitespace() == ws {
            end += 1;
        }
        segments.push(&bytes[start..end]);
        start = end;
    }
    segments
}
