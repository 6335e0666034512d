//! Character-level 1-of-k codec.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// What to do when encoding meets a character outside the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownCharPolicy {
    /// Return [`Error::UnknownChar`].
    Fail,
    /// Substitute the given id.
    Fallback(u32),
}

/// An ordered character vocabulary. Ids are dense, `0..len`, assigned in
/// code-point order, and index the one-hot input dimension of the
/// character LM.
#[derive(Debug, Clone)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharVocab {
    /// Builds a vocabulary of exactly the distinct characters observed.
    pub fn build(corpus_text: &str) -> Self {
        let set: BTreeSet<char> = corpus_text.chars().collect();
        Self::from_sorted(set.into_iter().collect())
    }

    /// Reconstructs a vocabulary from a character sequence, validating
    /// that it is sorted and duplicate-free.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        for pair in chars.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Codec(format!(
                    "character vocabulary must be sorted and distinct, found {:?} before {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Self::from_sorted(chars))
    }

    fn from_sorted(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        CharVocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, ch: char) -> Option<u32> {
        self.index.get(&ch).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.encode_with_policy(text, UnknownCharPolicy::Fail)
    }

    pub fn encode_with_policy(&self, text: &str, policy: UnknownCharPolicy) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(text.len());
        for (pos, ch) in text.chars().enumerate() {
            match self.index.get(&ch) {
                Some(&id) => ids.push(id),
                None => match policy {
                    UnknownCharPolicy::Fail => return Err(Error::UnknownChar { ch, pos }),
                    UnknownCharPolicy::Fallback(id) => ids.push(id),
                },
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            let ch = self.chars.get(id as usize).ok_or(Error::UnknownId {
                id,
                vocab: self.chars.len(),
            })?;
            out.push(*ch);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_collects_distinct_chars_sorted() {
        let v = CharVocab::build("aba\nc");
        assert_eq!(v.chars(), &['\n', 'a', 'b', 'c']);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn build_empty_is_empty() {
        let v = CharVocab::build("");
        assert_eq!(v.len(), 0);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = CharVocab::build("ab");
        assert_eq!(v.encode("ab").unwrap(), vec![0, 1]);
        assert_eq!(v.decode(&[1, 0]).unwrap(), "ba");
    }

    #[test]
    fn encode_unknown_char_reports_position() {
        let v = CharVocab::build("ab");
        match v.encode("ax") {
            Err(Error::UnknownChar { ch, pos }) => {
                assert_eq!(ch, 'x');
                assert_eq!(pos, 1);
            }
            other => panic!("expected UnknownChar, got {other:?}"),
        }
    }

    #[test]
    fn encode_fallback_policy_substitutes() {
        let v = CharVocab::build("ab");
        let ids = v
            .encode_with_policy("axb", UnknownCharPolicy::Fallback(0))
            .unwrap();
        assert_eq!(ids, vec![0, 0, 1]);
    }

    #[test]
    fn decode_out_of_range_id_errors() {
        let v = CharVocab::build("ab");
        assert!(v.decode(&[5]).is_err());
    }
}
