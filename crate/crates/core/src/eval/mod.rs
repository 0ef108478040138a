//! Importance-weighted likelihood, perplexity, interpolation with the
//! baseline language model, sentence BLEU, and retrieval over a pruned
//! prototype set.

mod bleu;

pub use bleu::smoothed_sentence_bleu;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PrototypeLibrary, TokenSeq};
use crate::dist::{log_sphere_area, log_sum_exp, prune, sample_vmf, vmf_log_density, DirichletPosterior, VmfParams};
use crate::model::{Model, Nlm};
use crate::tensor::Tape;
use crate::{Error, Result};

/// Default number of importance samples.
pub const DEFAULT_IWAE_SAMPLES: usize = 1000;

/// Mixture weights tried by [`best_mixture_weight`].
pub const MIXTURE_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Column header of evaluation reports.
pub const EVAL_HEADER: &str = "split\tmodel\tPPL\tM\tBLEU\tmean_log_prob\tS\twall_time";

/// A trained model restricted to a retained prototype subset, with the
/// prior θ̂ and the retriever renormalised over that subset.
#[derive(Debug, Clone)]
pub struct PrunedModel<'a> {
    pub model: &'a Model,
    pub library: &'a PrototypeLibrary,
    /// Token sequence of each library entry, by library position.
    pub prototypes: &'a [TokenSeq],
    retained: Vec<usize>,
    log_theta: Vec<f64>,
}

impl<'a> PrunedModel<'a> {
    pub fn new(
        model: &'a Model,
        library: &'a PrototypeLibrary,
        prototypes: &'a [TokenSeq],
        post: &DirichletPosterior,
        mut retained: Vec<usize>,
    ) -> Result<Self> {
        let p = library.len();
        retained.sort_unstable();
        if prototypes.len() != p || post.len() != p {
            return Err(Error::config(format!(
                "library has {p} entries, {} prototype sequences and a posterior over {}",
                prototypes.len(),
                post.len()
            )));
        }
        if retained.is_empty() {
            return Err(Error::config("retained prototype set is empty"));
        }
        if !retained.windows(2).all(|w| w[0] < w[1]) || retained[retained.len() - 1] >= p {
            return Err(Error::config("retained indices must be distinct library positions"));
        }
        let theta = post.posterior_mean();
        let kept: Vec<f64> = retained.iter().map(|&k| theta[k]).collect();
        let z: f64 = kept.iter().sum();
        let log_theta = kept.iter().map(|t| (t / z).ln()).collect();
        Ok(PrunedModel {
            model,
            library,
            prototypes,
            retained,
            log_theta,
        })
    }

    /// Keeps the smallest prefix of prototypes holding `mass` of θ̂.
    pub fn pruned(
        model: &'a Model,
        library: &'a PrototypeLibrary,
        prototypes: &'a [TokenSeq],
        post: &DirichletPosterior,
        mass: f64,
    ) -> Result<Self> {
        let retained = prune(post, mass)?;
        Self::new(model, library, prototypes, post, retained)
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// M, the number of retained prototypes.
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// Renormalised θ̂ over the retained set.
    pub fn theta(&self) -> Vec<f64> {
        self.log_theta.iter().map(|v| v.exp()).collect()
    }

    /// log q(t | x) for each retained prototype, in retained order.
    pub fn retriever_log_probs(&self, x_emb: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.model.retriever.log_probs_over(
            &mut tape,
            &self.model.params,
            self.library,
            x_emb,
            Some(&self.retained),
        )?;
        Ok(tape.value(out.log_probs).to_vec())
    }
}

/// Independent random stream for sentence `index`, so results do not depend
/// on evaluation order.
pub fn sentence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Importance-weighted estimate of log p(x) with `samples` draws of
/// (t, z) from the renormalised retriever and the inverse editor.
pub fn iwae_log_prob(x: &TokenSeq, x_emb: &[f64], pm: &PrunedModel, samples: usize, rng: &mut impl Rng) -> Result<f64> {
    if samples == 0 {
        return Err(Error::config("importance sample count must be at least 1"));
    }
    let model = pm.model;
    let d = model.config.z_dim;
    let kappa = model.config.kappa;
    let log_q = pm.retriever_log_probs(x_emb)?;
    let picker = WeightedIndex::new(log_q.iter().map(|v| v.exp()))
        .map_err(|e| Error::numeric(format!("retriever distribution: {e}")))?;
    let log_prior_z = -log_sphere_area(d);
    let mut posteriors: Vec<Option<VmfParams>> = vec![None; pm.len()];
    let mut log_w = Vec::with_capacity(samples);
    for _ in 0..samples {
        let j = picker.sample(rng);
        let k = pm.retained[j];
        let t = &pm.prototypes[k];
        if posteriors[j].is_none() {
            let triple = crate::align::align(t.inner(), x.inner());
            let mu = model.inverse.mean_value(&model.params, &triple)?;
            posteriors[j] = Some(VmfParams::new(mu, kappa)?);
        }
        let q_z = posteriors[j].as_ref().expect("filled above");
        let z = sample_vmf(q_z, rng)?;
        let lp = model.editor.log_prob_value(&model.params, x, t, &z)?;
        log_w.push(pm.log_theta[j] + log_prior_z + lp - log_q[j] - vmf_log_density(&z, q_z)?);
    }
    let est = log_sum_exp(&log_w) - (samples as f64).ln();
    if !est.is_finite() {
        return Err(Error::numeric(format!("non-finite importance estimate {est}")));
    }
    Ok(est)
}

/// Tokens a sentence contributes to perplexity: its words plus the end
/// marker.
pub fn token_count(x: &TokenSeq) -> usize {
    x.len() + 1
}

pub fn total_tokens(sentences: &[TokenSeq]) -> usize {
    sentences.iter().map(token_count).sum()
}

/// exp(−Σ log p / T).
pub fn perplexity(log_probs: &[f64], tokens: usize) -> f64 {
    (-log_probs.iter().sum::<f64>() / tokens as f64).exp()
}

/// log(w·e^editor + (1−w)·e^nlm), exact at the endpoints.
pub fn mix_log_prob(editor: f64, nlm: f64, w: f64) -> f64 {
    if w <= 0.0 {
        nlm
    } else if w >= 1.0 {
        editor
    } else {
        log_sum_exp(&[w.ln() + editor, (1.0 - w).ln() + nlm])
    }
}

pub fn mixture_log_prob(
    x: &TokenSeq,
    x_emb: &[f64],
    pm: &PrunedModel,
    nlm: &Nlm,
    w: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if nlm.vocab_size() != pm.model.config.vocab_size {
        return Err(Error::config(format!(
            "language model vocabulary {} differs from the editor's {}",
            nlm.vocab_size(),
            pm.model.config.vocab_size
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::config(format!("mixture weight {w} outside [0, 1]")));
    }
    let e = iwae_log_prob(x, x_emb, pm, samples, rng)?;
    Ok(mix_log_prob(e, nlm.log_prob_value(x)?, w))
}

/// Grid weight with the lowest mixture perplexity, and that perplexity.
pub fn best_mixture_weight(editor: &[f64], nlm: &[f64], tokens: usize) -> (f64, f64) {
    MIXTURE_GRID
        .iter()
        .map(|&w| {
            let mixed: Vec<f64> = editor.iter().zip(nlm).map(|(&e, &n)| mix_log_prob(e, n, w)).collect();
            (w, perplexity(&mixed, tokens))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid is non-empty")
}

/// Importance-weighted log-likelihood of every sentence, each with its own
/// random stream.
pub fn editor_log_probs(
    sentences: &[TokenSeq],
    embeddings: &[Vec<f64>],
    pm: &PrunedModel,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    sentences
        .iter()
        .zip(embeddings)
        .enumerate()
        .map(|(i, (x, e))| iwae_log_prob(x, e, pm, samples, &mut sentence_rng(seed, i)))
        .collect()
}

pub fn nlm_log_probs(sentences: &[TokenSeq], nlm: &Nlm) -> Result<Vec<f64>> {
    sentences.iter().map(|x| nlm.log_prob_value(x)).collect()
}

/// Library position of the retained prototype the retriever ranks first;
/// ties go to the lower position.
pub fn most_likely_prototype(x_emb: &[f64], pm: &PrunedModel) -> Result<usize> {
    Ok(top_prototypes(x_emb, pm, 1)?[0].0)
}

/// Up to `k` retained prototypes with their renormalised probabilities,
/// most probable first.
pub fn top_prototypes(x_emb: &[f64], pm: &PrunedModel, k: usize) -> Result<Vec<(usize, f64)>> {
    let log_q = pm.retriever_log_probs(x_emb)?;
    let mut rows: Vec<(usize, f64)> = pm.retained.iter().zip(&log_q).map(|(&i, lq)| (i, lq.exp())).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    rows.truncate(k);
    Ok(rows)
}

/// Mean BLEU of each sentence against its most likely prototype, and
/// against a prototype drawn uniformly from the retained set.
pub fn retrieval_bleu(
    sentences: &[TokenSeq],
    embeddings: &[Vec<f64>],
    pm: &PrunedModel,
    seed: u64,
) -> Result<(f64, f64)> {
    if sentences.is_empty() {
        return Err(Error::data("no sentences to score"));
    }
    let (mut best, mut random) = (0.0, 0.0);
    for (i, (x, e)) in sentences.iter().zip(embeddings).enumerate() {
        let k = most_likely_prototype(e, pm)?;
        best += smoothed_sentence_bleu(x.inner(), pm.prototypes[k].inner(), 4);
        let r = pm.retained[sentence_rng(seed, i).random_range(0..pm.len())];
        random += smoothed_sentence_bleu(x.inner(), pm.prototypes[r].inner(), 4);
    }
    let n = sentences.len() as f64;
    Ok((best / n, random / n))
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub split: String,
    pub model: String,
    pub ppl: Option<f64>,
    pub m: Option<usize>,
    pub bleu: Option<f64>,
    pub mean_log_prob: Option<f64>,
    pub samples: Option<usize>,
    pub wall_time: f64,
}

impl EvalRow {
    pub fn tsv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.split,
            self.model,
            opt(self.ppl.map(|p| format!("{p:.6}"))),
            opt(self.m.map(|m| m.to_string())),
            opt(self.bleu.map(|b| format!("{b:.6}"))),
            opt(self.mean_log_prob.map(|l| format!("{l:.6}"))),
            opt(self.samples.map(|s| s.to_string())),
            self.wall_time
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::tiny_config;

    struct Fixture {
        model: Model,
        library: PrototypeLibrary,
        protos: Vec<TokenSeq>,
        post: DirichletPosterior,
    }

    fn fixture(p: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
        let rows: Vec<Vec<f64>> = (0..p).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let protos = (0..p)
            .map(|k| TokenSeq::from_inner(&[4 + k % 3, 5, 4 + (k * 2) % 5]))
            .collect();
        Fixture {
            model: Model::new(tiny_config(9, p), 5).unwrap(),
            library: PrototypeLibrary::new((0..p).collect(), &rows).unwrap(),
            protos,
            post: DirichletPosterior::from_lambda((0..p).map(|k| 0.5 + k as f64).collect(), 0.5).unwrap(),
        }
    }

    #[test]
    fn perplexity_cases() {
        let x = TokenSeq::from_inner(&[4, 5, 6]);
        let t = token_count(&x) as f64;
        assert!((perplexity(&[-t * 2f64.ln()], 4) - 2.0).abs() < 1e-12);
        // Uniform model over V: every token costs ln V.
        let v = 13.0f64;
        let xs = [TokenSeq::from_inner(&[4]), TokenSeq::from_inner(&[4, 5, 6, 7])];
        let lps: Vec<f64> = xs.iter().map(|x| -(token_count(x) as f64) * v.ln()).collect();
        assert!((perplexity(&lps, total_tokens(&xs)) - v).abs() < 1e-9);
    }

    #[test]
    fn mixture_endpoints_and_bound() {
        assert_eq!(mix_log_prob(-3.0, -5.0, 0.0), -5.0);
        assert_eq!(mix_log_prob(-3.0, -5.0, 1.0), -3.0);
        let e = [-10.0, -3.0, -7.5];
        let n = [-4.0, -8.0, -7.0];
        let (_, best) = best_mixture_weight(&e, &n, 9);
        assert!(best <= perplexity(&e, 9).max(perplexity(&n, 9)));
    }

    #[test]
    fn single_prototype_iwae_is_z_only() {
        let f = fixture(3);
        let pm = PrunedModel::new(&f.model, &f.library, &f.protos, &f.post, vec![1]).unwrap();
        assert_eq!(pm.theta(), vec![1.0]);
        assert_eq!(pm.retriever_log_probs(&[0.1, 0.2, 0.3, 0.4]).unwrap(), vec![0.0]);
        let x = TokenSeq::from_inner(&[4, 6]);
        let est = iwae_log_prob(&x, &[0.1, 0.2, 0.3, 0.4], &pm, 50, &mut sentence_rng(1, 0)).unwrap();
        assert!(est.is_finite() && est < 0.0);
    }

    #[test]
    fn empty_retained_set_rejected() {
        let f = fixture(3);
        assert!(matches!(
            PrunedModel::new(&f.model, &f.library, &f.protos, &f.post, vec![]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn argmax_and_top_k_match_brute_force() {
        let f = fixture(6);
        let full = PrunedModel::new(&f.model, &f.library, &f.protos, &f.post, (0..6).collect()).unwrap();
        let sub = PrunedModel::new(&f.model, &f.library, &f.protos, &f.post, vec![1, 3, 4]).unwrap();
        let x = [0.3, -0.7, 0.2, 0.9];
        let w = f.model.params.value(f.model.retriever.w).data().to_vec();
        let score = |k: usize| {
            let row = f.library.embedding(k);
            (0..4).map(|i| row[i] * (0..4).map(|j| w[i * 4 + j] * x[j]).sum::<f64>()).sum::<f64>()
        };
        let brute = [1, 3, 4].into_iter().max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        assert_eq!(most_likely_prototype(&x, &sub).unwrap(), brute);
        let top = top_prototypes(&x, &sub, 10).unwrap();
        assert_eq!(top.len(), 3);
        assert!((top.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-12);
        // Restricting the candidates keeps their relative order.
        let all = top_prototypes(&x, &full, 6).unwrap();
        let order: Vec<usize> = all.iter().map(|r| r.0).filter(|k| [1, 3, 4].contains(k)).collect();
        assert_eq!(order, top.iter().map(|r| r.0).collect::<Vec<_>>());
    }

    #[test]
    fn iwae_is_reproducible_per_sentence() {
        let f = fixture(4);
        let pm = PrunedModel::new(&f.model, &f.library, &f.protos, &f.post, (0..4).collect()).unwrap();
        let xs = vec![TokenSeq::from_inner(&[4, 5]), TokenSeq::from_inner(&[6])];
        let es = vec![vec![0.1, 0.0, 0.3, 0.2], vec![-0.4, 0.1, 0.0, 0.5]];
        let a = editor_log_probs(&xs, &es, &pm, 20, 9).unwrap();
        let b = editor_log_probs(&xs[1..], &es[1..], &pm, 20, 9).unwrap();
        let c = editor_log_probs(&xs, &es, &pm, 20, 9).unwrap();
        assert_eq!(a, c);
        assert_ne!(a[1], b[0]);
        let rev = iwae_log_prob(&xs[1], &es[1], &pm, 20, &mut sentence_rng(9, 1)).unwrap();
        assert_eq!(rev, a[1]);
    }

    #[test]
    fn eval_row_format() {
        let row = EvalRow {
            split: "test".into(),
            model: "nlm".into(),
            ppl: Some(12.5),
            m: None,
            bleu: None,
            mean_log_prob: Some(-3.25),
            samples: None,
            wall_time: 0.5,
        };
        assert_eq!(row.tsv(), "test\tnlm\t12.500000\t-\t-\t-3.250000\t-\t0.500");
        assert_eq!(row.tsv().split('\t').count(), EVAL_HEADER.split('\t').count());
    }
}
