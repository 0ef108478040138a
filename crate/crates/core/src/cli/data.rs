use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{
    load_sentence_embeddings, sentence_embedding, subsample_indices, EmbeddingNormalizer, EmbeddingTable,
    PrototypeLibrary, TokenSeq, Vocabulary,
};
use crate::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Encoded splits with their normalised sentence embeddings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub normalizer: EmbeddingNormalizer,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub sentences: Vec<TokenSeq>,
    pub embeddings: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(Error::config(format!("unknown split {name:?}; expected train, valid or test"))),
        }
    }

    /// Library of `p` training sentences drawn with `seed`.
    pub fn library(&self, p: usize, seed: u64) -> Result<PrototypeLibrary> {
        let idx = subsample_indices(self.train.sentences.len(), p, seed)?;
        self.library_from(idx)
    }

    pub fn library_from(&self, indices: Vec<usize>) -> Result<PrototypeLibrary> {
        let rows: Vec<Vec<f64>> = indices
            .iter()
            .map(|&i| {
                self.train
                    .embeddings
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::data(format!("library index {i} outside the training split")))
            })
            .collect::<Result<_>>()?;
        PrototypeLibrary::new(indices, &rows)
    }

    /// Token sequences of the library members, by library position.
    pub fn prototypes(&self, library: &PrototypeLibrary) -> Vec<TokenSeq> {
        library
            .indices()
            .iter()
            .map(|&i| self.train.sentences[i].clone())
            .collect()
    }
}

/// Raw text of the three splits plus optional precomputed sentence
/// embeddings that replace the word-vector average.
#[derive(Debug, Clone, Default)]
pub struct RawSplits {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub precomputed: Option<[Vec<Vec<f64>>; 3]>,
}

/// Builds the vocabulary on the training split, encodes every split, embeds
/// every sentence and fits the normaliser on the training embeddings.
pub fn build_dataset(raw: &RawSplits, table: &EmbeddingTable, min_count: usize, max_vocab: usize) -> Result<Dataset> {
    if raw.train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let vocab = Vocabulary::build(&raw.train, min_count, max_vocab)?;
    let texts = [&raw.train, &raw.valid, &raw.test];
    let mut encoded = Vec::with_capacity(3);
    for (name, lines) in SPLITS.iter().zip(texts) {
        let seqs: Vec<TokenSeq> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| vocab.encode(l).map_err(|e| e.context(format!("{name} line {}", i + 1))))
            .collect::<Result<_>>()?;
        encoded.push(seqs);
    }
    let raw_emb: Vec<Vec<Vec<f64>>> = match &raw.precomputed {
        Some(pre) => {
            for ((name, rows), seqs) in SPLITS.iter().zip(pre).zip(&encoded) {
                if rows.len() != seqs.len() {
                    return Err(Error::data(format!(
                        "{name}: {} precomputed embeddings for {} sentences",
                        rows.len(),
                        seqs.len()
                    )));
                }
            }
            pre.to_vec()
        }
        None => encoded
            .iter()
            .map(|seqs| seqs.iter().map(|s| sentence_embedding(s, &vocab, table)).collect())
            .collect(),
    };
    let normalizer = EmbeddingNormalizer::fit(&raw_emb[0])?;
    let mut splits = encoded.into_iter().zip(raw_emb).map(|(sentences, rows)| Split {
        embeddings: rows.iter().map(|r| normalizer.apply(r)).collect(),
        sentences,
    });
    let (train, valid, test) = (
        splits.next().expect("three splits"),
        splits.next().expect("three splits"),
        splits.next().expect("three splits"),
    );
    Ok(Dataset {
        vocab,
        normalizer,
        train,
        valid,
        test,
    })
}

pub fn format_ids(seqs: &[TokenSeq]) -> String {
    let mut out = String::new();
    for s in seqs {
        let ids: Vec<String> = s.inner().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}", ids.join(" "));
    }
    out
}

pub fn parse_ids(text: &str, vocab_size: usize) -> Result<Vec<TokenSeq>> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let ids: Vec<usize> = line
                .split_whitespace()
                .map(|t| match t.parse::<usize>() {
                    Ok(i) if i < vocab_size => Ok(i),
                    _ => Err(Error::data(format!("line {}: bad token id {t:?}", n + 1))),
                })
                .collect::<Result<_>>()?;
            if ids.is_empty() {
                return Err(Error::data(format!("line {}: empty sentence", n + 1)));
            }
            Ok(TokenSeq::from_inner(&ids))
        })
        .collect()
}

/// One row per line, values in shortest round-trip form.
pub fn format_rows(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for r in rows {
        let vals: Vec<String> = r.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes the dataset into `dir`: vocabulary, encoded splits, embeddings
/// and the normaliser.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    write_file(&dir.join("vocab.txt"), &ds.vocab.to_text())?;
    for name in SPLITS {
        let s = ds.split(name)?;
        write_file(&dir.join(format!("{name}.ids")), &format_ids(&s.sentences))?;
        write_file(&dir.join(format!("{name}.emb")), &format_rows(&s.embeddings))?;
    }
    let norm = serde_json::to_string_pretty(&ds.normalizer).map_err(|e| Error::data(e.to_string()))?;
    write_file(&dir.join("normalizer.json"), &norm)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::from_text(&read_file(&dir.join("vocab.txt"))?)?;
    let normalizer: EmbeddingNormalizer = serde_json::from_str(&read_file(&dir.join("normalizer.json"))?)
        .map_err(|e| Error::data(format!("normalizer.json: {e}")))?;
    let mut splits = Vec::with_capacity(3);
    for name in SPLITS {
        let ids_path = dir.join(format!("{name}.ids"));
        let sentences = parse_ids(&read_file(&ids_path)?, vocab.len())
            .map_err(|e| e.context(ids_path.display().to_string()))?;
        let embeddings = load_sentence_embeddings(&dir.join(format!("{name}.emb")))?;
        if embeddings.len() != sentences.len() {
            return Err(Error::data(format!(
                "{name}: {} sentences but {} embeddings",
                sentences.len(),
                embeddings.len()
            )));
        }
        splits.push(Split { sentences, embeddings });
    }
    let mut it = splits.into_iter();
    Ok(Dataset {
        vocab,
        normalizer,
        train: it.next().expect("three splits"),
        valid: it.next().expect("three splits"),
        test: it.next().expect("three splits"),
    })
}

/// Embeds free text the same way the dataset was embedded.
pub fn embed_text(text: &str, lowercase: bool, ds: &Dataset, table: &EmbeddingTable) -> Result<(TokenSeq, Vec<f64>)> {
    let seq = ds.vocab.encode(&crate::corpus::normalize_line(text, lowercase))?;
    let raw = sentence_embedding(&seq, &ds.vocab, table);
    if raw.len() != ds.normalizer.mean.len() {
        return Err(Error::config(format!(
            "word vectors of dimension {} but the dataset embeddings have {}",
            raw.len(),
            ds.normalizer.mean.len()
        )));
    }
    Ok((seq, ds.normalizer.apply(&raw)))
}
