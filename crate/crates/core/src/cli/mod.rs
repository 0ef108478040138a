//! Command-line surface. Commands communicate only through files under the
//! run's output directory.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod generate;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::{Error, Result};
use commands::PrototypeSource;
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "protoedit", version, about = "Prototype-then-edit language model with a sparse prototype library")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dirichlet prior concentration.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Inverse editor vMF concentration.
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    /// Posterior mass kept by pruning.
    #[arg(long, global = true)]
    pub mass: Option<f64>,
    #[arg(long, global = true)]
    pub iwae_samples: Option<usize>,
    #[arg(long, global = true)]
    pub mixture_weight: Option<f64>,
    /// Output directory of the run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train/valid/test splits.
    Synth,
    /// Build the vocabulary, encoded splits and sentence embeddings.
    Preprocess,
    /// Train the editor and the baseline language model.
    Train,
    /// Write perplexity and retrieval BLEU to eval.tsv.
    Eval,
    /// Write the retained prototype set and its summary.
    Prune,
    /// Show the most probable retained prototypes for a sentence.
    Retrieve {
        #[arg(long)]
        text: String,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Edit a prototype with edit vectors drawn from the prior.
    Generate {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Decode along the great circle between two prior edit vectors.
    Interpolate {
        #[command(flatten)]
        source: SourceArgs,
        /// Midpoints between the endpoints.
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SourceArgs {
    /// Library position of the prototype.
    #[arg(long)]
    pub prototype: Option<usize>,
    /// Free-text prototype.
    #[arg(long)]
    pub text: Option<String>,
}

impl SourceArgs {
    fn source(&self) -> PrototypeSource {
        match (&self.prototype, &self.text) {
            (Some(k), _) => PrototypeSource::Index(*k),
            (None, Some(t)) => PrototypeSource::Text(t.clone()),
            (None, None) => unreachable!("clap requires one of --prototype and --text"),
        }
    }
}

impl Cli {
    /// Loads the config file and applies every flag.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            alpha: self.alpha,
            kappa: self.kappa,
            mass: self.mass,
            iwae_samples: self.iwae_samples,
            mixture_weight: self.mixture_weight,
        });
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        match &self.command {
            Command::Retrieve { top_k: Some(k), .. } => cfg.eval.top_k = *k,
            Command::Generate { count: Some(n), .. } => cfg.eval.count = *n,
            Command::Interpolate { steps: Some(s), .. } => cfg.eval.steps = *s,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("standard output", e)
}

/// Runs one command, printing its human-readable result to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::Synth => {
            let dir = commands::cmd_synth(&cfg)?;
            writeln!(out, "wrote {}", dir.display()).map_err(out_err)?;
        }
        Command::Preprocess => {
            let ds = commands::cmd_preprocess(&cfg)?;
            writeln!(
                out,
                "vocabulary {}; sentences {} / {} / {}",
                ds.vocab.len(),
                ds.train.sentences.len(),
                ds.valid.sentences.len(),
                ds.test.sentences.len()
            )
            .map_err(out_err)?;
        }
        Command::Train => {
            let s = commands::cmd_train(&cfg)?;
            writeln!(out, "{} steps; checkpoint {}", s.steps, s.checkpoint.display()).map_err(out_err)?;
        }
        Command::Eval => {
            writeln!(out, "{}", crate::eval::EVAL_HEADER).map_err(out_err)?;
            for r in commands::cmd_eval(&cfg)? {
                writeln!(out, "{}", r.tsv()).map_err(out_err)?;
            }
        }
        Command::Prune => {
            let s = commands::cmd_prune(&cfg)?;
            writeln!(
                out,
                "M = {}, retained mass {:.4}, alpha {}",
                s.retained.len(),
                s.retained_mass,
                s.alpha
            )
            .map_err(out_err)?;
        }
        Command::Retrieve { text, .. } => {
            for r in commands::cmd_retrieve(&cfg, text)? {
                writeln!(out, "{}\t{:.6}\t{}", r.position, r.prob, r.text).map_err(out_err)?;
            }
        }
        Command::Generate { source, .. } | Command::Interpolate { source, .. } => {
            let g = if matches!(cli.command, Command::Generate { .. }) {
                commands::cmd_generate(&cfg, &source.source())?
            } else {
                commands::cmd_interpolate(&cfg, &source.source())?
            };
            writeln!(out, "prototype: {}", g.prototype).map_err(out_err)?;
            for s in g.sentences {
                writeln!(out, "{s}").map_err(out_err)?;
            }
        }
    }
    Ok(())
}
