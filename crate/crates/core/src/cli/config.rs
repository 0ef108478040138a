use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{read_file, write_file};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Everything a command needs, read from a TOML file and then overridden by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, library sampling, initialisation, batching
    /// and evaluation.
    pub seed: u64,
    /// Directory for every artifact of the run.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Corpus files. Without a training file the synthetic corpus is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Whitespace-separated word vectors, one word per line.
    pub word_vectors: Option<PathBuf>,
    /// Precomputed sentence embeddings, one row per sentence.
    pub train_embeddings: Option<PathBuf>,
    pub valid_embeddings: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
    pub lowercase: bool,
    pub min_count: usize,
    pub max_vocab: usize,
    /// Dimension of the hashed vectors used when no word vectors are given.
    pub embedding_dim: usize,
    /// Copy the word vectors into the token embeddings before training.
    pub init_word_embeddings: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            test: None,
            word_vectors: None,
            train_embeddings: None,
            valid_embeddings: None,
            test_embeddings: None,
            lowercase: false,
            min_count: 1,
            max_vocab: 50_000,
            embedding_dim: 32,
            init_word_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub templates: PathBuf,
    pub fillers: PathBuf,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            templates: PathBuf::from("data/synthetic/templates.txt"),
            fillers: PathBuf::from("data/synthetic/fillers.txt"),
            train: 2000,
            valid: 200,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    pub iwae_samples: usize,
    /// Posterior mass kept by pruning.
    pub mass: f64,
    /// Fixed interpolation weight; tuned on the validation split when absent.
    pub mixture_weight: Option<f64>,
    pub beam: usize,
    pub max_len: usize,
    pub top_k: usize,
    /// Sentences printed by `generate`.
    pub count: usize,
    /// Midpoints between the two interpolation endpoints.
    pub steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            iwae_samples: crate::eval::DEFAULT_IWAE_SAMPLES,
            mass: 0.9,
            mixture_weight: None,
            beam: 5,
            max_len: 40,
            top_k: 5,
            count: 5,
            steps: 3,
        }
    }
}

/// Flag values that replace config entries when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
    pub mass: Option<f64>,
    pub iwae_samples: Option<usize>,
    pub mixture_weight: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(a) = o.alpha {
            self.model.alpha = a;
        }
        if let Some(k) = o.kappa {
            self.model.kappa = k;
        }
        if let Some(m) = o.mass {
            self.eval.mass = m;
        }
        if let Some(s) = o.iwae_samples {
            self.eval.iwae_samples = s;
        }
        if let Some(w) = o.mixture_weight {
            self.eval.mixture_weight = Some(w);
        }
        self.train.seed = self.seed;
    }

    /// Checks the settings that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.eval;
        if !(e.mass > 0.0 && e.mass <= 1.0) {
            return Err(Error::config(format!("mass must lie in (0, 1], got {}", e.mass)));
        }
        if e.iwae_samples == 0 {
            return Err(Error::config("iwae_samples must be at least 1"));
        }
        if let Some(w) = e.mixture_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config(format!("mixture weight must lie in [0, 1], got {w}")));
            }
        }
        if self.data.train.is_some() != self.data.valid.is_some() || self.data.train.is_some() != self.data.test.is_some()
        {
            return Err(Error::config("data.train, data.valid and data.test must be given together"));
        }
        Ok(())
    }

    /// Writes the resolved configuration as `<out_dir>/<command>.resolved.toml`.
    pub fn write_resolved(&self, command: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(format!("{command}.resolved.toml"));
        write_file(&path, &self.to_toml()?)?;
        Ok(path)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nalpa = 0.1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[model]\nalpha = 0.001\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.alpha, 0.001);
        assert_eq!(c.model.kappa, ModelConfig::default().kappa);
        assert_eq!(c.eval, EvalConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            seed: Some(9),
            alpha: Some(1e-3),
            mixture_weight: Some(0.25),
            ..Overrides::default()
        });
        c.data.train = Some("a.txt".into());
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 9);
    }

    #[test]
    fn bad_mass_is_a_config_error() {
        let mut c = RunConfig::default();
        c.eval.mass = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
