use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{
    build_dataset, embed_text, load_dataset, read_file, save_dataset, write_file, Dataset, RawSplits, SPLITS,
};
use super::generate::{generate, interpolate};
use crate::corpus::{
    generate_synthetic, load_sentence_embeddings, parse_fillers, parse_templates, read_corpus, EmbeddingTable,
    PrototypeLibrary, SyntheticCorpus, TokenSeq,
};
use crate::dist::{prune, retained_mass, DirichletPosterior};
use crate::eval::{
    best_mixture_weight, editor_log_probs, mix_log_prob, nlm_log_probs, perplexity, retrieval_bleu, top_prototypes,
    total_tokens, EvalRow, PrunedModel, EVAL_HEADER,
};
use crate::model::{Model, ModelConfig, Nlm};
use crate::train::{train, train_nlm, TrainData};
use crate::{Error, Result};

/// Three synthetic splits and the template behind each sentence.
#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub text: [Vec<String>; 3],
    pub templates: [Vec<usize>; 3],
}

/// Generates the train, validation and test splits from independent
/// streams derived from the run seed.
pub fn synthesize(cfg: &RunConfig) -> Result<SyntheticSplits> {
    let templates = parse_templates(&read_file(&cfg.synth.templates)?);
    let fillers = parse_fillers(&read_file(&cfg.synth.fillers)?)?;
    let corpus = SyntheticCorpus::new(templates, fillers)?;
    let sizes = [cfg.synth.train, cfg.synth.valid, cfg.synth.test];
    let mut text: [Vec<String>; 3] = Default::default();
    let mut tmpl: [Vec<usize>; 3] = Default::default();
    for (i, n) in sizes.into_iter().enumerate() {
        let seed = cfg.seed.wrapping_mul(3).wrapping_add(i as u64 + 1);
        for s in generate_synthetic(&corpus, n, seed) {
            text[i].push(s.text);
            tmpl[i].push(s.template);
        }
    }
    Ok(SyntheticSplits { text, templates: tmpl })
}

/// Writes `<out_dir>/synth/{split}.txt` and the template id of every line
/// to `{split}.templates`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let splits = synthesize(cfg)?;
    let dir = cfg.out_dir.join("synth");
    for ((name, text), tmpl) in SPLITS.iter().zip(&splits.text).zip(&splits.templates) {
        write_file(&dir.join(format!("{name}.txt")), &lines(text))?;
        let ids: Vec<String> = tmpl.iter().map(usize::to_string).collect();
        write_file(&dir.join(format!("{name}.templates")), &lines(&ids))?;
    }
    cfg.write_resolved("synth")?;
    Ok(dir)
}

fn lines(items: &[String]) -> String {
    items.iter().map(|s| format!("{s}\n")).collect()
}

fn word_vectors(cfg: &RunConfig) -> Result<EmbeddingTable> {
    match &cfg.data.word_vectors {
        Some(p) => EmbeddingTable::load(p),
        None => Ok(EmbeddingTable::empty(cfg.data.embedding_dim)),
    }
}

fn raw_splits(cfg: &RunConfig) -> Result<RawSplits> {
    let d = &cfg.data;
    let text = match (&d.train, &d.valid, &d.test) {
        (Some(tr), Some(va), Some(te)) => [
            read_corpus(tr, d.lowercase)?,
            read_corpus(va, d.lowercase)?,
            read_corpus(te, d.lowercase)?,
        ],
        _ => synthesize(cfg)?.text,
    };
    let precomputed = match (&d.train_embeddings, &d.valid_embeddings, &d.test_embeddings) {
        (None, None, None) => None,
        (Some(a), Some(b), Some(c)) => Some([
            load_sentence_embeddings(a)?,
            load_sentence_embeddings(b)?,
            load_sentence_embeddings(c)?,
        ]),
        _ => {
            return Err(Error::config(
                "train_embeddings, valid_embeddings and test_embeddings must be given together",
            ))
        }
    };
    let [train, valid, test] = text;
    Ok(RawSplits {
        train,
        valid,
        test,
        precomputed,
    })
}

/// Builds the vocabulary, encoded splits and sentence embeddings and caches
/// them under `<out_dir>/data`.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<Dataset> {
    let raw = raw_splits(cfg)?;
    let table = if raw.precomputed.is_some() && cfg.data.word_vectors.is_none() {
        EmbeddingTable::empty(1)
    } else {
        word_vectors(cfg)?
    };
    let ds = build_dataset(&raw, &table, cfg.data.min_count, cfg.data.max_vocab)?;
    save_dataset(&ds, &cfg.dataset_dir())?;
    cfg.write_resolved("preprocess")?;
    log::info!(
        "vocabulary {} tokens; {} / {} / {} sentences",
        ds.vocab.len(),
        ds.train.sentences.len(),
        ds.valid.sentences.len(),
        ds.test.sentences.len()
    );
    Ok(ds)
}

fn load_cached(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(&cfg.dataset_dir()).map_err(|e| e.context("loading the preprocessed data (run `preprocess` first)"))
}

/// Fills in the sizes that come from the data. A library size of 0 means
/// the whole training split.
pub fn resolve_model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.vocab_size = ds.vocab.len();
    m.sentence_dim = ds.normalizer.mean.len();
    if m.library_size == 0 || m.library_size > ds.train.sentences.len() {
        m.library_size = ds.train.sentences.len();
    }
    m
}

/// Summary of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub nlm_history: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains the editor and the baseline language model and writes the
/// checkpoint, the library and both training logs.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let ds = load_cached(cfg)?;
    let mut cfg = cfg.clone();
    cfg.model = resolve_model_config(&cfg, &ds);
    cfg.validate()?;
    let mc = cfg.model.clone();
    let library = ds.library(mc.library_size, cfg.seed)?;
    let mut model = Model::new(mc.clone(), cfg.seed)?;
    let mut nlm = Nlm::new(&mc, cfg.seed)?;
    if cfg.data.init_word_embeddings {
        let table = word_vectors(&cfg)?;
        let n = model.init_word_embeddings(&ds.vocab, &table)?;
        nlm.init_word_embeddings(&ds.vocab, &table)?;
        log::info!("initialised {n} word embeddings from pretrained vectors");
    }
    let mut post = DirichletPosterior::new(mc.alpha, mc.library_size, ds.train.sentences.len())?;
    let data = TrainData::new(&ds.train.sentences, &ds.train.embeddings, &library)?;

    let log_path = cfg.out_dir.join("train_log.tsv");
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let records = train(&mut model, &mut post, &data, &cfg.train, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let nlm_history = train_nlm(&mut nlm, &ds.train.sentences, &cfg.train)?;
    let mut nlm_log = String::from("epoch\tmean_nll\n");
    for (i, h) in nlm_history.iter().enumerate() {
        nlm_log.push_str(&format!("{}\t{h:.6}\n", i + 1));
    }
    write_file(&cfg.out_dir.join("nlm_log.tsv"), &nlm_log)?;

    let idx: Vec<String> = library.indices().iter().map(usize::to_string).collect();
    write_file(&cfg.out_dir.join("library.txt"), &lines(&idx))?;
    let ck = Checkpoint::new(&model, &nlm, &post, library.indices(), ds.vocab.fingerprint())?;
    let path = cfg.checkpoint_path();
    ck.save(&path)?;
    cfg.write_resolved("train")?;
    Ok(TrainSummary {
        steps: records.len() as u64,
        nlm_history,
        checkpoint: path,
    })
}

/// A trained run loaded back from disk.
pub struct Run {
    pub cfg: RunConfig,
    pub ds: Dataset,
    pub model: Model,
    pub nlm: Nlm,
    pub post: DirichletPosterior,
    pub library: PrototypeLibrary,
    pub prototypes: Vec<TokenSeq>,
}

impl Run {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ds = load_cached(cfg)?;
        let path = cfg.checkpoint_path();
        let ck = Checkpoint::load(&path).map_err(|e| e.context("loading the checkpoint (run `train` first)"))?;
        if ck.metadata.vocab_fingerprint != ds.vocab.fingerprint() {
            return Err(Error::data(format!(
                "{} was trained with a different vocabulary",
                path.display()
            )));
        }
        let (model, nlm) = ck.restore()?;
        let library = ds.library_from(ck.metadata.library.clone())?;
        let prototypes = ds.prototypes(&library);
        Ok(Run {
            cfg: cfg.clone(),
            ds,
            model,
            nlm,
            post: ck.metadata.posterior,
            library,
            prototypes,
        })
    }

    pub fn pruned(&self) -> Result<PrunedModel<'_>> {
        PrunedModel::pruned(&self.model, &self.library, &self.prototypes, &self.post, self.cfg.eval.mass)
    }

    /// Token sequence of a library entry, or of free text.
    pub fn prototype(&self, source: &PrototypeSource) -> Result<TokenSeq> {
        match source {
            PrototypeSource::Index(k) => self.prototypes.get(*k).cloned().ok_or_else(|| {
                Error::config(format!(
                    "unknown prototype index {k}; the library has {} entries",
                    self.prototypes.len()
                ))
            }),
            PrototypeSource::Text(t) => {
                let seq = self.ds.vocab.encode(&crate::corpus::normalize_line(t, self.cfg.data.lowercase))?;
                if seq.is_empty() {
                    return Err(Error::config("prototype text is empty"));
                }
                Ok(seq)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrototypeSource {
    /// Position in the prototype library.
    Index(usize),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSummary {
    /// Retained library positions, largest posterior mean first.
    pub retained: Vec<usize>,
    pub retained_mass: f64,
    pub alpha: f64,
    pub mass: f64,
}

/// Writes `pruned.txt` (one library position per line) and
/// `prune_summary.tsv`.
pub fn cmd_prune(cfg: &RunConfig) -> Result<PruneSummary> {
    let run = Run::load(cfg)?;
    let retained = prune(&run.post, cfg.eval.mass)?;
    let summary = PruneSummary {
        retained_mass: retained_mass(&run.post, &retained),
        alpha: run.post.alpha,
        mass: cfg.eval.mass,
        retained,
    };
    write_pruned(&cfg.out_dir, &summary)?;
    cfg.write_resolved("prune")?;
    Ok(summary)
}

fn write_pruned(dir: &Path, s: &PruneSummary) -> Result<()> {
    let idx: Vec<String> = s.retained.iter().map(usize::to_string).collect();
    write_file(&dir.join("pruned.txt"), &lines(&idx))?;
    write_file(
        &dir.join("prune_summary.tsv"),
        &format!(
            "M\tretained_mass\talpha\tmass\n{}\t{:.6}\t{}\t{}\n",
            s.retained.len(),
            s.retained_mass,
            s.alpha,
            s.mass
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Evaluates the baseline, the pruned editor, the editor over the whole
/// library and their interpolation, and writes `eval.tsv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    let run = Run::load(cfg)?;
    let e = &cfg.eval;
    let split = run.ds.split(&e.split)?;
    let (xs, embs) = (&split.sentences, &split.embeddings);
    if xs.is_empty() {
        return Err(Error::data(format!("split {} is empty", e.split)));
    }
    let tokens = total_tokens(xs);
    let s = e.iwae_samples;
    let mut rows = Vec::new();
    let row = |model: &str, lps: Option<&[f64]>, m: Option<usize>, bleu: Option<f64>, samples, t0: Instant| EvalRow {
        split: e.split.clone(),
        model: model.into(),
        ppl: lps.map(|l| perplexity(l, tokens)),
        m,
        bleu,
        mean_log_prob: lps.map(mean),
        samples,
        wall_time: t0.elapsed().as_secs_f64(),
    };

    let t0 = Instant::now();
    let nlm = nlm_log_probs(xs, &run.nlm)?;
    rows.push(row("nlm", Some(&nlm), None, None, None, t0));

    let t0 = Instant::now();
    let pm = run.pruned()?;
    let ed = editor_log_probs(xs, embs, &pm, s, cfg.seed)?;
    let (bleu, random_bleu) = retrieval_bleu(xs, embs, &pm, cfg.seed)?;
    rows.push(row("editor", Some(&ed), Some(pm.len()), Some(bleu), Some(s), t0));
    rows.push(row("random_retrieval", None, Some(pm.len()), Some(random_bleu), None, t0));

    let t0 = Instant::now();
    let p = run.library.len();
    let full = PrunedModel::new(&run.model, &run.library, &run.prototypes, &run.post, (0..p).collect())?;
    let ed_full = editor_log_probs(xs, embs, &full, s, cfg.seed)?;
    let (bleu_full, _) = retrieval_bleu(xs, embs, &full, cfg.seed)?;
    rows.push(row("editor_unpruned", Some(&ed_full), Some(p), Some(bleu_full), Some(s), t0));

    let t0 = Instant::now();
    let w = match e.mixture_weight {
        Some(w) => w,
        None => {
            let v = &run.ds.valid;
            if v.sentences.is_empty() {
                return Err(Error::data("cannot tune the mixture weight on an empty validation split"));
            }
            let ve = editor_log_probs(&v.sentences, &v.embeddings, &pm, s, cfg.seed)?;
            let vn = nlm_log_probs(&v.sentences, &run.nlm)?;
            best_mixture_weight(&ve, &vn, total_tokens(&v.sentences)).0
        }
    };
    let mix: Vec<f64> = ed.iter().zip(&nlm).map(|(&a, &b)| mix_log_prob(a, b, w)).collect();
    rows.push(row(&format!("mixture(w={w})"), Some(&mix), Some(pm.len()), None, Some(s), t0));

    let mut report = format!("{EVAL_HEADER}\n");
    for r in &rows {
        report.push_str(&r.tsv());
        report.push('\n');
    }
    write_file(&cfg.out_dir.join("eval.tsv"), &report)?;
    cfg.write_resolved("eval")?;
    Ok(rows)
}

/// One retrieved prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub position: usize,
    pub prob: f64,
    pub text: String,
}

/// The `top_k` most probable retained prototypes for a sentence.
pub fn cmd_retrieve(cfg: &RunConfig, text: &str) -> Result<Vec<Retrieved>> {
    if cfg.data.train_embeddings.is_some() {
        return Err(Error::config(
            "retrieval from free text needs word vectors; this run uses precomputed sentence embeddings",
        ));
    }
    let run = Run::load(cfg)?;
    let (_, emb) = embed_text(text, cfg.data.lowercase, &run.ds, &word_vectors(cfg)?)?;
    let pm = run.pruned()?;
    let top = top_prototypes(&emb, &pm, cfg.eval.top_k)?;
    cfg.write_resolved("retrieve")?;
    Ok(top
        .into_iter()
        .map(|(k, prob)| Retrieved {
            position: k,
            prob,
            text: run.ds.vocab.decode(&run.prototypes[k]),
        })
        .collect())
}

/// The prototype followed by decoded sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub prototype: String,
    pub sentences: Vec<String>,
}

pub fn cmd_generate(cfg: &RunConfig, source: &PrototypeSource) -> Result<Generated> {
    let run = Run::load(cfg)?;
    let proto = run.prototype(source)?;
    let e = &cfg.eval;
    let out = generate(&run.model, &proto, e.count, cfg.seed, e.beam, e.max_len)?;
    cfg.write_resolved("generate")?;
    Ok(Generated {
        prototype: run.ds.vocab.decode(&proto),
        sentences: out.iter().map(|b| run.ds.vocab.decode_ids(&b.tokens)).collect(),
    })
}

pub fn cmd_interpolate(cfg: &RunConfig, source: &PrototypeSource) -> Result<Generated> {
    let run = Run::load(cfg)?;
    let proto = run.prototype(source)?;
    let e = &cfg.eval;
    let out = interpolate(&run.model, &proto, e.steps, cfg.seed, e.beam, e.max_len)?;
    cfg.write_resolved("interpolate")?;
    Ok(Generated {
        prototype: run.ds.vocab.decode(&proto),
        sentences: out.iter().map(|b| run.ds.vocab.decode_ids(&b.tokens)).collect(),
    })
}
