//! Corpus ingestion: vocabulary, encoding, sentence embeddings, the
//! prototype library and a templated synthetic corpus generator.

mod embed;
mod library;
mod synth;
mod vocab;

use std::fs;
use std::path::Path;

pub use embed::{
    load_sentence_embeddings, oov_vector, sentence_embedding, EmbeddingNormalizer, EmbeddingTable,
};
pub use library::{subsample_indices, PrototypeLibrary};
pub use synth::{
    generate_synthetic, parse_fillers, parse_templates, SyntheticCorpus, SyntheticSentence,
    Template, TemplatePiece,
};
pub use vocab::{TokenSeq, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use crate::{Error, Result};

/// 64-bit FNV-1a. Stable across platforms and releases, unlike the std
/// hasher, which matters for the hash-seeded embedding vectors.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace-normalises a raw line, optionally lowercasing it.
pub fn normalize_line(line: &str, lowercase: bool) -> String {
    let joined = line.split_whitespace().collect::<Vec<_>>().join(" ");
    if lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}

/// Reads a corpus file (one sentence per line), dropping blank lines.
pub fn read_corpus(path: &Path, lowercase: bool) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| normalize_line(l, lowercase))
        .filter(|l| !l.is_empty())
        .collect())
}
