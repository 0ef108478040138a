use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{read_file, write_file};
use crate::dist::DirichletPosterior;
use crate::model::{section_of, Model, ModelConfig, Nlm};
use crate::tensor::{ParameterSet, Tensor};
use crate::{Error, Result};

/// Stored weights, one map per network, keyed by parameter name.
pub type Section = BTreeMap<String, StoredTensor>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub model_config: ModelConfig,
    pub vocab_fingerprint: u64,
    /// Training-set index of each library entry.
    pub library: Vec<usize>,
    pub posterior: DirichletPosterior,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub metadata: Metadata,
    pub retriever: Section,
    pub inverse_editor: Section,
    pub editor: Section,
    pub nlm: Section,
}

fn store(ps: &ParameterSet, sections: &mut [(&str, &mut Section)]) -> Result<()> {
    for (name, t) in ps.named_values() {
        let sec = section_of(name);
        let (_, target) = sections
            .iter_mut()
            .find(|(s, _)| *s == sec)
            .ok_or_else(|| Error::data(format!("parameter {name:?} belongs to no checkpoint section")))?;
        target.insert(
            name.to_string(),
            StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }
    Ok(())
}

fn restore(ps: &mut ParameterSet, sections: &[&Section]) -> Result<()> {
    let mut loaded = 0;
    for sec in sections {
        for (name, st) in sec.iter() {
            let t = Tensor::new(st.shape.clone(), st.data.clone()).map_err(|e| e.context(name.clone()))?;
            ps.load(name, t)?;
            loaded += 1;
        }
    }
    if loaded != ps.len() {
        return Err(Error::data(format!(
            "checkpoint holds {loaded} tensors, the network has {}",
            ps.len()
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: &Model, nlm: &Nlm, post: &DirichletPosterior, library: &[usize], vocab_fingerprint: u64) -> Result<Self> {
        let (mut retriever, mut inverse_editor, mut editor, mut nlm_sec) =
            (Section::new(), Section::new(), Section::new(), Section::new());
        store(
            &model.params,
            &mut [
                ("retriever", &mut retriever),
                ("inverse_editor", &mut inverse_editor),
                ("editor", &mut editor),
            ],
        )?;
        store(&nlm.params, &mut [("nlm", &mut nlm_sec)])?;
        Ok(Checkpoint {
            metadata: Metadata {
                model_config: model.config.clone(),
                vocab_fingerprint,
                library: library.to_vec(),
                posterior: post.clone(),
                step: model.params.step(),
            },
            retriever,
            inverse_editor,
            editor,
            nlm: nlm_sec,
        })
    }

    /// Rebuilds the networks and checks every stored shape.
    pub fn restore(&self) -> Result<(Model, Nlm)> {
        let cfg = self.metadata.model_config.clone();
        if self.metadata.posterior.len() != cfg.library_size || self.metadata.library.len() != cfg.library_size {
            return Err(Error::data("checkpoint library, posterior and config disagree on the library size"));
        }
        let mut model = Model::new(cfg.clone(), 0)?;
        restore(&mut model.params, &[&self.retriever, &self.inverse_editor, &self.editor])?;
        let mut nlm = Nlm::new(&cfg, 0)?;
        restore(&mut nlm.params, &[&self.nlm])?;
        Ok((model, nlm))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::data(e.to_string()))?;
        write_file(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_file(path)?).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}
