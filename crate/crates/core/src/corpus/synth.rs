use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplatePiece {
    Word(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub pieces: Vec<TemplatePiece>,
}

impl Template {
    /// Parses a template line; `[NAME]` marks a slot.
    pub fn parse(line: &str) -> Self {
        let pieces = line
            .split_whitespace()
            .map(|tok| match tok.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
                Some(name) if !name.is_empty() => TemplatePiece::Slot(name.to_string()),
                _ => TemplatePiece::Word(tok.to_string()),
            })
            .collect();
        Template { pieces }
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            TemplatePiece::Slot(s) => Some(s.as_str()),
            TemplatePiece::Word(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSentence {
    pub text: String,
    /// Index of the template the sentence was generated from.
    pub template: usize,
}

/// Templates plus their slot fillers.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub templates: Vec<Template>,
    pub fillers: BTreeMap<String, Vec<String>>,
}

pub fn parse_templates(text: &str) -> Vec<Template> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(Template::parse)
        .collect()
}

/// Parses `SLOTNAME: filler1 filler2 ...` lines.
pub fn parse_fillers(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::config(format!("filler line {}: missing ':'", lineno + 1)))?;
        let words: Vec<String> = rest.split_whitespace().map(String::from).collect();
        out.insert(name.trim().to_string(), words);
    }
    Ok(out)
}

impl SyntheticCorpus {
    pub fn new(templates: Vec<Template>, fillers: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::config("synthetic corpus needs at least one template"));
        }
        for (i, t) in templates.iter().enumerate() {
            if t.pieces.is_empty() {
                return Err(Error::config(format!("template {i} is empty")));
            }
            for slot in t.slots() {
                match fillers.get(slot) {
                    Some(f) if !f.is_empty() => {}
                    _ => {
                        return Err(Error::config(format!(
                            "template {i}: slot [{slot}] has no fillers"
                        )))
                    }
                }
            }
        }
        Ok(SyntheticCorpus { templates, fillers })
    }
}

/// Draws `n` sentences: a template uniformly at random, then each slot
/// filled uniformly from its filler list.
pub fn generate_synthetic(corpus: &SyntheticCorpus, n: usize, seed: u64) -> Vec<SyntheticSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let template = rng.random_range(0..corpus.templates.len());
            let words: Vec<&str> = corpus.templates[template]
                .pieces
                .iter()
                .map(|p| match p {
                    TemplatePiece::Word(w) => w.as_str(),
                    TemplatePiece::Slot(s) => {
                        let f = &corpus.fillers[s];
                        f[rng.random_range(0..f.len())].as_str()
                    }
                })
                .collect();
            SyntheticSentence {
                text: words.join(" "),
                template,
            }
        })
        .collect()
}
