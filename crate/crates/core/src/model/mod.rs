//! The retriever q(t|x), the inverse editor q(z|t,x), the editor p(x|t,z)
//! and a plain LSTM language model used as a baseline.

mod beam;
mod editor;
mod inverse;
mod nlm;
mod retriever;

pub use beam::{beam_search, BeamResult, StepModel};
pub use editor::{Editor, EditorDecoder};
pub use inverse::InverseEditor;
pub use nlm::{Nlm, NlmDecoder};
pub use retriever::{Retriever, RetrieverOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, Vocabulary};
use crate::tensor::{ParamId, ParameterSet};
use crate::{Error, Result};

/// Hyperparameters and sizes shared by all networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Symmetric Dirichlet prior concentration.
    pub alpha: f64,
    /// Fixed vMF concentration of the inverse editor.
    pub kappa: f64,
    /// Retriever temperature μ.
    pub temperature: f64,
    /// Prototype samples per example (L).
    pub samples: usize,
    pub z_dim: usize,
    /// Dimension of the frozen sentence embeddings.
    pub sentence_dim: usize,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub op_dim: usize,
    pub init_scale: f64,
    pub vocab_size: usize,
    pub library_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            alpha: 0.3,
            kappa: 30.0,
            temperature: 0.3,
            samples: 10,
            z_dim: 50,
            sentence_dim: 100,
            word_dim: 100,
            hidden_dim: 400,
            op_dim: 10,
            init_scale: 0.1,
            vocab_size: 0,
            library_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return bad(format!("kappa must be >= 0, got {}", self.kappa));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.samples < 2 {
            return bad(format!("need at least 2 prototype samples, got {}", self.samples));
        }
        if self.z_dim < 2 {
            return bad(format!("z_dim must be >= 2, got {}", self.z_dim));
        }
        for (name, v) in [
            ("sentence_dim", self.sentence_dim),
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
            ("op_dim", self.op_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return bad(format!("vocabulary of size {} has no regular tokens", self.vocab_size));
        }
        if self.library_size == 0 {
            return bad("prototype library is empty".into());
        }
        Ok(())
    }
}

/// Retriever, inverse editor and editor, with their weights in one
/// [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub retriever: Retriever,
    pub inverse: InverseEditor,
    pub editor: Editor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let retriever = Retriever::new(&mut params, &config)?;
        let editor = Editor::new(&mut params, &config, &mut rng)?;
        let inverse = InverseEditor::new(&mut params, &config, editor.embed, &mut rng)?;
        Ok(Model {
            config,
            params,
            retriever,
            inverse,
            editor,
        })
    }

    /// Copies pretrained word vectors into the token embedding for every
    /// vocabulary entry the table knows. Returns how many rows were set.
    pub fn init_word_embeddings(&mut self, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<usize> {
        copy_word_vectors(&mut self.params, self.editor.embed, vocab, table)
    }
}

pub(crate) fn copy_word_vectors(
    ps: &mut ParameterSet,
    embed: ParamId,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Result<usize> {
    let dim = ps.value(embed).shape()[1];
    if table.dim() != dim {
        return Err(Error::config(format!(
            "embedding file has dimension {}, word_dim is {dim}",
            table.dim()
        )));
    }
    let mut set = 0;
    let data = ps.value_mut(embed).data_mut();
    for id in crate::corpus::RESERVED.len()..vocab.len() {
        if let Some(v) = table.get(vocab.token(id)) {
            data[id * dim..(id + 1) * dim].copy_from_slice(v);
            set += 1;
        }
    }
    Ok(set)
}

/// Which checkpoint section a parameter name belongs to.
pub fn section_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub fn tiny_config(vocab_size: usize, library_size: usize) -> ModelConfig {
        ModelConfig {
            alpha: 0.5,
            kappa: 5.0,
            temperature: 0.7,
            samples: 3,
            z_dim: 3,
            sentence_dim: 4,
            word_dim: 3,
            hidden_dim: 4,
            op_dim: 2,
            init_scale: 0.5,
            vocab_size,
            library_size,
        }
    }
}
