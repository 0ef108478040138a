//! The evidence lower bound, its score-function gradient for the retriever,
//! and the training loop that interleaves network updates with stochastic
//! updates of the Dirichlet posterior.

use std::io::Write;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::align;
use crate::corpus::{PrototypeLibrary, TokenSeq};
use crate::dist::{
    draw_noise, expected_log_theta, kl_dirichlet, kl_vmf_uniform, log_sum_exp, sample_vmf, svi_update, DirichletPosterior,
    SviConfig, VmfParams,
};
use crate::model::{Model, Nlm, Retriever};
use crate::tensor::{AdamConfig, Tape, Tensor, Var};
use crate::{Error, Result};

/// Column header of the training log.
pub const LOG_HEADER: &str = "step\trec\tkl_z\tkl_t\tkl_dir\tbeta\trho_t\tlambda_entropy\twall_time";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs over which β rises linearly from 0 to 1.
    pub anneal_epochs: usize,
    /// Free-bits threshold on the prototype KL term.
    pub free_bits: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub svi_sigma: f64,
    pub svi_tau: f64,
    /// Edit-vector draws per sampled prototype inside the reward.
    pub z_samples: usize,
    /// Use the leave-one-out baseline instead of the plain mean.
    pub leave_one_out: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            anneal_epochs: 5,
            free_bits: 5.0,
            lr: 1e-3,
            clip_norm: 5.0,
            svi_sigma: 10.0,
            svi_tau: 0.6,
            z_samples: 1,
            leave_one_out: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.free_bits >= 0.0) {
            return Err(Error::config(format!("free_bits must be >= 0, got {}", self.free_bits)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.z_samples == 0 {
            return Err(Error::config("z_samples must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Training sentences with their frozen (normalised) sentence embeddings
/// and the prototype library drawn from them.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub sentences: &'a [TokenSeq],
    pub embeddings: &'a [Vec<f64>],
    pub library: &'a PrototypeLibrary,
}

impl<'a> TrainData<'a> {
    pub fn new(sentences: &'a [TokenSeq], embeddings: &'a [Vec<f64>], library: &'a PrototypeLibrary) -> Result<Self> {
        if sentences.len() != embeddings.len() {
            return Err(Error::data(format!(
                "{} sentences but {} embeddings",
                sentences.len(),
                embeddings.len()
            )));
        }
        if let Some(&bad) = library.indices().iter().find(|&&i| i >= sentences.len()) {
            return Err(Error::data(format!("library index {bad} outside the training split")));
        }
        Ok(TrainData {
            sentences,
            embeddings,
            library,
        })
    }

    pub fn prototype(&self, k: usize) -> &TokenSeq {
        &self.sentences[self.library.train_index(k)]
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Batch-level objective terms. All but `kl_dir` are per-example means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub rec: f64,
    pub kl_z: f64,
    pub kl_t: f64,
    pub kl_dir: f64,
    /// rec − kl_z − kl_t − kl_dir / N.
    pub objective: f64,
    /// rec − kl_z − kl_t: the per-example bound with θ integrated under q(θ).
    pub local_bound: f64,
    pub beta: f64,
}

/// β = min(1, step / (m · steps_per_epoch)); m = 0 gives 1.
pub fn anneal_beta(step: usize, steps_per_epoch: usize, m: usize) -> f64 {
    if m == 0 || steps_per_epoch == 0 {
        return 1.0;
    }
    (step as f64 / (m * steps_per_epoch) as f64).min(1.0)
}

/// Recorded forward pass for one example.
struct ExampleGraph {
    /// Mean reward over the L prototype samples.
    rec: Var,
    kl_t: Var,
    /// Σ_l (r_l − b_l) log q(t_l) / L with the advantages held constant.
    surrogate: Var,
    q_dense: Vec<f64>,
    rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct SampleOptions {
    samples: usize,
    z_samples: usize,
    leave_one_out: bool,
}

fn example_graph(
    tape: &mut Tape,
    model: &Model,
    data: &TrainData,
    elog: &[f64],
    x_index: usize,
    opts: SampleOptions,
    rng: &mut impl Rng,
) -> Result<ExampleGraph> {
    let ps = &model.params;
    let x = &data.sentences[x_index];
    let ret = model
        .retriever
        .log_probs(tape, ps, data.library, Some(x_index), &data.embeddings[x_index])?;
    let logq_vals = tape.value(ret.log_probs).to_vec();
    let q: Vec<f64> = logq_vals.iter().map(|v| v.exp()).collect();

    let q_var = tape.exp(ret.log_probs);
    let elog_c: Vec<f64> = ret.candidates.iter().map(|&k| elog[k]).collect();
    let elog_c = tape.constant(Tensor::vector(elog_c));
    let diff = tape.sub(ret.log_probs, elog_c)?;
    let kl_t = tape.dot(q_var, diff)?;

    let picker = WeightedIndex::new(&q).map_err(|e| Error::numeric(format!("retriever distribution: {e}")))?;
    let l = opts.samples;
    let mut reward_vars = Vec::with_capacity(l);
    let mut positions = Vec::with_capacity(l);
    for _ in 0..l {
        let pos = picker.sample(rng);
        positions.push(pos);
        let t = data.prototype(ret.candidates[pos]);
        let triple = align(t.inner(), x.inner());
        let mu = model.inverse.mean(tape, ps, &triple)?;
        let mut draws = Vec::with_capacity(opts.z_samples);
        for _ in 0..opts.z_samples {
            let noise = draw_noise(model.config.kappa, model.config.z_dim, rng)?;
            let z = noise.compose_on_tape(tape, mu)?;
            draws.push(model.editor.log_prob(tape, ps, x, t, z)?);
        }
        let r = tape.sum_scalars(&draws)?;
        reward_vars.push(tape.scale(r, 1.0 / opts.z_samples as f64));
    }
    let rewards: Vec<f64> = reward_vars.iter().map(|&v| tape.scalar(v)).collect();
    let total: f64 = rewards.iter().sum();
    let mut terms = Vec::with_capacity(l);
    for (&r, &pos) in rewards.iter().zip(&positions) {
        let b = if opts.leave_one_out {
            (total - r) / (l - 1) as f64
        } else {
            total / l as f64
        };
        let lq = tape.pick(ret.log_probs, pos)?;
        terms.push(tape.scale(lq, (r - b) / l as f64));
    }
    let surrogate = tape.sum_scalars(&terms)?;
    let rec_sum = tape.sum_scalars(&reward_vars)?;
    let rec = tape.scale(rec_sum, 1.0 / l as f64);

    let mut q_dense = vec![0.0; data.library.len()];
    for (&k, &p) in ret.candidates.iter().zip(&q) {
        q_dense[k] = p;
    }
    Ok(ExampleGraph {
        rec,
        kl_t,
        surrogate,
        q_dense,
        rewards,
    })
}

fn options(model: &Model, cfg: &TrainConfig) -> SampleOptions {
    SampleOptions {
        samples: model.config.samples,
        z_samples: cfg.z_samples,
        leave_one_out: cfg.leave_one_out,
    }
}

/// Monte Carlo estimate of the objective terms on a batch, without
/// gradients.
pub fn elbo_terms(
    model: &Model,
    post: &DirichletPosterior,
    data: &TrainData,
    batch: &[usize],
    rng: &mut impl Rng,
) -> Result<ElboReport> {
    let elog = expected_log_theta(post)?;
    let opts = SampleOptions {
        samples: model.config.samples,
        z_samples: 1,
        leave_one_out: false,
    };
    let (mut rec, mut kl_t) = (0.0, 0.0);
    for &i in batch {
        let mut tape = Tape::new();
        let g = example_graph(&mut tape, model, data, &elog, i, opts, rng)?;
        rec += tape.scalar(g.rec);
        kl_t += tape.scalar(g.kl_t);
    }
    let n = batch.len() as f64;
    report(model, post, data.len(), rec / n, kl_t / n, 1.0)
}

fn report(model: &Model, post: &DirichletPosterior, n: usize, rec: f64, kl_t: f64, beta: f64) -> Result<ElboReport> {
    let kl_z = kl_vmf_uniform(model.config.kappa, model.config.z_dim)?;
    let kl_dir = kl_dirichlet(post)?;
    Ok(ElboReport {
        rec,
        kl_z,
        kl_t,
        kl_dir,
        objective: rec - kl_z - kl_t - kl_dir / n as f64,
        local_bound: rec - kl_z - kl_t,
        beta,
    })
}

/// Gradients of the objective with respect to the retriever's W for a
/// single example, split into the score-function part and the analytic
/// part from the prototype KL term.
#[derive(Debug, Clone)]
pub struct ReinforceGradients {
    pub reinforce: Vec<f64>,
    pub kl: Vec<f64>,
    pub rewards: Vec<f64>,
}

pub fn reinforce_gradients(
    model: &Model,
    post: &DirichletPosterior,
    data: &TrainData,
    x_index: usize,
    leave_one_out: bool,
    rng: &mut impl Rng,
) -> Result<ReinforceGradients> {
    if model.config.samples < 2 {
        return Err(Error::config("the reward baseline needs at least 2 samples"));
    }
    let elog = expected_log_theta(post)?;
    let opts = SampleOptions {
        samples: model.config.samples,
        z_samples: 1,
        leave_one_out,
    };
    let mut tape = Tape::new();
    let g = example_graph(&mut tape, model, data, &elog, x_index, opts, rng)?;
    let w = model.retriever.w;
    let n = model.params.value(w).len();
    let grad_of = |v: Var, sign: f64| -> Result<Vec<f64>> {
        let grads = tape.backward(v)?;
        Ok(grads
            .param(w)
            .map(|x| x.iter().map(|v| sign * v).collect())
            .unwrap_or_else(|| vec![0.0; n]))
    };
    Ok(ReinforceGradients {
        reinforce: grad_of(g.surrogate, 1.0)?,
        kl: grad_of(g.kl_t, -1.0)?,
        rewards: g.rewards,
    })
}

/// Largest library [`exact_marginal_small`] accepts.
pub const EXACT_MARGINAL_MAX_P: usize = 16;

/// log Σ_k θ̂_k · (1/S) Σ_s p(x | t_k, z_s) with z_s drawn from the uniform
/// prior on the sphere and θ̂ the posterior mean. Enumerates the library, so
/// only small libraries are accepted.
pub fn exact_marginal_small(
    x: &TokenSeq,
    model: &Model,
    post: &DirichletPosterior,
    data: &TrainData,
    z_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let p = data.library.len();
    if p > EXACT_MARGINAL_MAX_P {
        return Err(Error::config(format!(
            "exact marginal enumerates the library; {p} prototypes exceeds {EXACT_MARGINAL_MAX_P}"
        )));
    }
    if z_samples == 0 {
        return Err(Error::config("z_samples must be at least 1"));
    }
    if post.len() != p {
        return Err(Error::config(format!("posterior over {} prototypes, library has {p}", post.len())));
    }
    let prior = VmfParams::uniform(model.config.z_dim)?;
    let theta = post.posterior_mean();
    let log_s = (z_samples as f64).ln();
    let mut terms = Vec::with_capacity(p);
    for (k, &th) in theta.iter().enumerate() {
        let t = data.prototype(k);
        let mut lps = Vec::with_capacity(z_samples);
        for _ in 0..z_samples {
            let z = sample_vmf(&prior, rng)?;
            lps.push(model.editor.log_prob_value(&model.params, x, t, &z)?);
        }
        terms.push(th.ln() + log_sum_exp(&lps) - log_s);
    }
    Ok(log_sum_exp(&terms))
}

/// State carried across training steps.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub svi: SviConfig,
    pub steps_per_epoch: usize,
    pub step: usize,
    rng: ChaCha8Rng,
    start: Instant,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: ElboReport,
    pub rho: f64,
    pub lambda_entropy: f64,
    pub wall_time: f64,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        let r = &self.report;
        format!(
            "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.3}",
            self.step, r.rec, r.kl_z, r.kl_t, r.kl_dir, r.beta, self.rho, self.lambda_entropy, self.wall_time
        )
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, n: usize) -> Result<Self> {
        cfg.validate()?;
        let svi = SviConfig::new(cfg.svi_sigma, cfg.svi_tau, n)?;
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            svi,
            steps_per_epoch,
            step: 0,
            rng,
            start: Instant::now(),
        })
    }

    /// Shuffled batches for one epoch.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Gradient step on the networks followed by one SVI update of λ.
    pub fn train_step(
        &mut self,
        model: &mut Model,
        post: &mut DirichletPosterior,
        data: &TrainData,
        batch: &[usize],
    ) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let beta = anneal_beta(self.step, self.steps_per_epoch, self.cfg.anneal_epochs);
        let elog = expected_log_theta(post)?;
        let opts = options(model, &self.cfg);
        let inv_b = 1.0 / batch.len() as f64;
        let (mut rec, mut kl_t) = (0.0, 0.0);
        let mut rows = Vec::with_capacity(batch.len());
        model.params.zero_grad();
        for &i in batch {
            let mut tape = Tape::new();
            let g = example_graph(&mut tape, model, data, &elog, i, opts, &mut self.rng)?;
            let r = tape.scalar(g.rec);
            let k = tape.scalar(g.kl_t);
            if !r.is_finite() || !k.is_finite() {
                log::error!("non-finite terms for example {i}: rec={r} kl_t={k}; batch {batch:?}");
                return Err(Error::numeric(format!(
                    "non-finite objective at step {} (example {i}, rec={r}, kl_t={k})",
                    self.step
                )));
            }
            rec += r;
            kl_t += k;
            // loss = −rec − surrogate + β·kl_t when kl_t ≥ c.
            let mut parts = vec![g.rec, g.surrogate];
            let neg = if k >= self.cfg.free_bits && beta > 0.0 {
                let kl = tape.scale(g.kl_t, -beta);
                parts.push(kl);
                tape.sum_scalars(&parts)?
            } else {
                tape.sum_scalars(&parts)?
            };
            let loss = tape.scale(neg, -inv_b);
            let grads = tape.backward(loss)?;
            model.params.accumulate(&grads);
            rows.push(g.q_dense);
        }
        model.params.clip_grad_norm(self.cfg.clip_norm);
        model.params.adam_step(&self.cfg.adam());
        let n = batch.len() as f64;
        let rep = report(model, post, data.len(), rec / n, kl_t / n, beta)?;
        let rho = svi_update(post, &rows, &self.svi)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            report: rep,
            rho,
            lambda_entropy: post.mean_entropy(),
            wall_time: self.start.elapsed().as_secs_f64(),
        })
    }
}

/// Runs `cfg.epochs` epochs, writing one TSV line per step to `log`.
pub fn train(
    model: &mut Model,
    post: &mut DirichletPosterior,
    data: &TrainData,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<StepRecord>> {
    let mut trainer = Trainer::new(cfg.clone(), data.len())?;
    let mut records = Vec::new();
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io("training log", e))?;
    for epoch in 0..cfg.epochs {
        for batch in trainer.epoch_batches(data.len()) {
            let rec = trainer.train_step(model, post, data, &batch)?;
            writeln!(log, "{}", rec.tsv()).map_err(|e| Error::io("training log", e))?;
            records.push(rec);
        }
        if let Some(last) = records.last() {
            log::info!(
                "epoch {} step {} rec {:.3} kl_t {:.3} entropy {:.3}",
                epoch + 1,
                last.step,
                last.report.rec,
                last.report.kl_t,
                last.lambda_entropy
            );
        }
    }
    Ok(records)
}

/// Trains the baseline language model with the same batching, epochs,
/// learning rate and clipping. Returns the mean negative log-likelihood per
/// epoch.
pub fn train_nlm(nlm: &mut Nlm, sentences: &[TokenSeq], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = cfg.adam();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sentences.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inv_b = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let lp = nlm.log_prob(&mut tape, &sentences[i])?;
                total -= tape.scalar(lp);
                let loss = tape.scale(lp, -inv_b);
                let grads = tape.backward(loss)?;
                nlm.params.accumulate(&grads);
            }
            nlm.params.clip_grad_norm(cfg.clip_norm);
            nlm.params.adam_step(&adam);
        }
        history.push(total / sentences.len() as f64);
    }
    Ok(history)
}

/// Dense retriever distribution over the library for a training example.
pub fn retriever_row(model: &Model, data: &TrainData, x_index: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = model
        .retriever
        .log_probs(&mut tape, &model.params, data.library, Some(x_index), &data.embeddings[x_index])?;
    Ok(Retriever::dense_probs(&tape, &out, data.library.len()))
}
