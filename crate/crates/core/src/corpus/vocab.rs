use std::collections::HashMap;
use std::fmt::Write as _;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Reserved token strings, in index order.
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// An encoded sentence, stored with its boundary markers.
///
/// `len()` counts only the tokens between the markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    /// Wraps inner token ids with begin/end markers.
    pub fn from_inner(inner: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(inner.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(inner);
        ids.push(EOS);
        TokenSeq { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn inner(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.ids.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens scored by a left-to-right model: the inner tokens plus the
    /// end marker.
    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenised lines.
    ///
    /// Tokens seen at least `min_count` times are kept, at most `max_size`
    /// of them (not counting the reserved entries), ordered by descending
    /// frequency with ties broken lexicographically.
    pub fn build<S: AsRef<str>>(lines: &[S], min_count: usize, max_size: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::config("min_count must be at least 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::config("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string())))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    /// Encodes a whitespace-tokenised sentence, mapping unknown words to
    /// the unknown index.
    pub fn encode(&self, sentence: &str) -> Result<TokenSeq> {
        let inner: Vec<usize> = sentence.split_whitespace().map(|t| self.id(t)).collect();
        if inner.is_empty() {
            return Err(Error::data("cannot encode an empty sentence"));
        }
        Ok(TokenSeq::from_inner(&inner))
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        self.decode_ids(seq.inner())
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn fingerprint(&self) -> u64 {
        super::fnv1a(self.tokens.join("\n").as_bytes())
    }

    /// One token per line, reserved entries first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::data("vocabulary file does not start with the reserved tokens"));
        }
        let vocab = Self::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()));
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::data("vocabulary file contains duplicate tokens"));
        }
        Ok(vocab)
    }
}
