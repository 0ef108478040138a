use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TokenSeq, Vocabulary};
use crate::{Error, Result};

/// Frozen word vectors keyed by token string.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

/// Deterministic stand-in vector for a token missing from the table:
/// entries uniform in [-0.1, 0.1], seeded by the token's FNV-1a hash.
pub fn oov_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(super::fnv1a(token.as_bytes()));
    (0..dim).map(|_| rng.random_range(-0.1..=0.1)).collect()
}

impl EmbeddingTable {
    /// A table with no stored vectors; every token takes its hash-seeded
    /// vector.
    pub fn empty(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn from_vectors(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        for (tok, v) in &vectors {
            if v.len() != dim {
                return Err(Error::data(format!(
                    "embedding for {tok:?} has {} entries, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!("embedding for {tok:?} is not finite")));
            }
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    /// Parses `token f1 f2 ... fd` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(tok) = parts.next() else { continue };
            let v: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::data(format!("line {}: bad number {p:?}", lineno + 1))
                    })
                })
                .collect::<Result<_>>()?;
            let d = *dim.get_or_insert(v.len());
            if d == 0 || v.len() != d {
                return Err(Error::data(format!(
                    "line {}: expected {d} values, found {}",
                    lineno + 1,
                    v.len()
                )));
            }
            vectors.insert(tok.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::data("embedding file is empty"))?;
        Self::from_vectors(dim, vectors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        match self.vectors.get(token) {
            Some(v) => v.clone(),
            None => oov_vector(token, self.dim),
        }
    }
}

/// Mean of the word vectors of the inner tokens (markers excluded).
pub fn sentence_embedding(tokens: &TokenSeq, vocab: &Vocabulary, table: &EmbeddingTable) -> Vec<f64> {
    let mut acc = vec![0.0; table.dim()];
    for &id in tokens.inner() {
        let tok = vocab.token(id);
        match table.get(tok) {
            Some(v) => acc.iter_mut().zip(v).for_each(|(a, x)| *a += x),
            None => acc
                .iter_mut()
                .zip(oov_vector(tok, table.dim()))
                .for_each(|(a, x)| *a += x),
        }
    }
    let n = tokens.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Reads precomputed per-sentence embeddings, one line per sentence.
pub fn load_sentence_embeddings(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::data(format!("{}:{}: bad value {p:?}", path.display(), lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if first != v.len() {
                return Err(Error::data(format!(
                    "{}:{}: expected {first} values, found {}",
                    path.display(),
                    lineno + 1,
                    v.len()
                )));
            }
        }
        rows.push(v);
    }
    Ok(rows)
}

/// Fixed affine map applied to every sentence embedding before it reaches
/// the retriever: subtract the training mean, divide by the RMS norm of the
/// centred training embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNormalizer {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl EmbeddingNormalizer {
    pub fn identity(dim: usize) -> Self {
        EmbeddingNormalizer {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::data("cannot fit an embedding normaliser on zero rows"))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let msq = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        let scale = if msq > 1e-24 { 1.0 / msq.sqrt() } else { 1.0 };
        Ok(EmbeddingNormalizer { mean, scale })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .map(|(x, m)| (x - m) * self.scale)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> (Vocabulary, EmbeddingTable) {
        let vocab = Vocabulary::build(&["a b c"], 1, 10).unwrap();
        let table = EmbeddingTable::parse("a 1 2\nb 3 -4\n").unwrap();
        (vocab, table)
    }

    #[test]
    fn single_token_is_its_vector() {
        let (v, t) = table();
        let e = sentence_embedding(&v.encode("a").unwrap(), &v, &t);
        assert_eq!(e, vec![1.0, 2.0]);
    }

    #[test]
    fn repeated_token_same_as_one() {
        let (v, t) = table();
        let one = sentence_embedding(&v.encode("b").unwrap(), &v, &t);
        let two = sentence_embedding(&v.encode("b b").unwrap(), &v, &t);
        assert_eq!(one, two);
    }

    #[test]
    fn hand_averaged_pair() {
        let (v, t) = table();
        let e = sentence_embedding(&v.encode("a b").unwrap(), &v, &t);
        assert_eq!(e, vec![2.0, -1.0]);
    }

    #[test]
    fn oov_vectors_are_deterministic_and_bounded() {
        let a = oov_vector("zebra", 16);
        assert_eq!(a, oov_vector("zebra", 16));
        assert_ne!(a, oov_vector("zebu", 16));
        assert!(a.iter().all(|x| (-0.1..=0.1).contains(x)));
        let (v, t) = table();
        let e = sentence_embedding(&v.encode("c").unwrap(), &v, &t);
        assert_eq!(e, oov_vector("c", 2));
    }

    #[test]
    fn permutation_invariant() {
        let (v, t) = table();
        let x = sentence_embedding(&v.encode("a b c a").unwrap(), &v, &t);
        let y = sentence_embedding(&v.encode("c a a b").unwrap(), &v, &t);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn ragged_embedding_file_rejected() {
        assert!(matches!(EmbeddingTable::parse("a 1 2\nb 3\n"), Err(Error::Data(_))));
        assert!(matches!(EmbeddingTable::parse("a 1 x\n"), Err(Error::Data(_))));
    }

    #[test]
    fn normalizer_centres_and_scales() {
        let rows = vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![2.0, 3.0], vec![2.0, -3.0]];
        let n = EmbeddingNormalizer::fit(&rows).unwrap();
        assert_eq!(n.mean, vec![2.0, 0.0]);
        let out: Vec<Vec<f64>> = rows.iter().map(|r| n.apply(r)).collect();
        let msq: f64 = out.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / 4.0;
        assert!((msq - 1.0).abs() < 1e-12);
    }
}
