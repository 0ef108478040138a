use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Uniformly samples `p` distinct training indices out of `n`, returned in
/// ascending order. `p == n` yields `0..n`.
pub fn subsample_indices(n: usize, p: usize, seed: u64) -> Result<Vec<usize>> {
    if p == 0 || p > n {
        return Err(Error::config(format!(
            "library size {p} must lie in 1..={n} (training set size)"
        )));
    }
    if p == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, p).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// The prototype library: a subset of the training split plus the frozen
/// sentence embedding of each member.
#[derive(Debug, Clone)]
pub struct PrototypeLibrary {
    indices: Vec<usize>,
    dim: usize,
    embeddings: Vec<f64>,
    position: HashMap<usize, usize>,
}

impl PrototypeLibrary {
    /// `rows[k]` is the embedding of training sentence `indices[k]`.
    pub fn new(indices: Vec<usize>, rows: &[Vec<f64>]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("prototype library is empty"));
        }
        if rows.len() != indices.len() {
            return Err(Error::data(format!(
                "{} library indices but {} embedding rows",
                indices.len(),
                rows.len()
            )));
        }
        let dim = rows[0].len();
        let mut embeddings = Vec::with_capacity(dim * rows.len());
        for r in rows {
            if r.len() != dim || r.iter().any(|x| !x.is_finite()) {
                return Err(Error::data("library embeddings must be finite and equally sized"));
            }
            embeddings.extend_from_slice(r);
        }
        let mut position = HashMap::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            if position.insert(i, k).is_some() {
                return Err(Error::data(format!("duplicate library index {i}")));
            }
        }
        Ok(PrototypeLibrary {
            indices,
            dim,
            embeddings,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Training-split index of library entry `k`.
    pub fn train_index(&self, k: usize) -> usize {
        self.indices[k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Library position of a training sentence, if it is a member.
    pub fn position_of(&self, train_index: usize) -> Option<usize> {
        self.position.get(&train_index).copied()
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major `P x dim` matrix of embeddings.
    pub fn embedding_matrix(&self) -> &[f64] {
        &self.embeddings
    }
}
