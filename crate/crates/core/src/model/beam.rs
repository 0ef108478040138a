use std::cmp::Ordering;

use crate::corpus::{BOS, EOS, PAD};
use crate::{Error, Result};

/// A left-to-right model that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    fn start(&mut self) -> Result<Self::State>;

    /// Feeds `token` and returns the new state and the log-probabilities of
    /// the next token.
    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Generated tokens, end marker excluded.
    pub tokens: Vec<usize>,
    /// Total log-probability, end marker included when finished.
    pub score: f64,
    /// False when no hypothesis emitted the end marker within `max_len`.
    pub finished: bool,
}

struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
}

/// Orders by score descending, then token sequence ascending.
fn better(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search from the start token. Each live hypothesis proposes its
/// `beam` best next tokens (never padding or the start token); hypotheses
/// ending in the end marker are set aside, and the best `beam` of the rest
/// continue. `max_len` bounds the number of emitted tokens, end marker
/// included. Ties go to the lower token id.
pub fn beam_search<M: StepModel>(model: &mut M, beam: usize, max_len: usize) -> Result<BeamResult> {
    if beam == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::config("max_len must be at least 1"));
    }
    let start = model.start()?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: start,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(usize, usize, f64, M::State)> = Vec::new();
        for (p, h) in live.iter().enumerate() {
            let last = *h.tokens.last().unwrap_or(&BOS);
            let (state, logp) = model.step(&h.state, last)?;
            let mut order: Vec<usize> = (0..logp.len()).filter(|&t| t != PAD && t != BOS).collect();
            order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
            order.truncate(beam);
            for tok in order {
                cands.push((p, tok, h.score + logp[tok], state.clone()));
            }
        }
        let mut next = Vec::new();
        for (p, tok, score, state) in cands {
            let mut tokens = live[p].tokens.clone();
            if tok == EOS {
                finished.push((tokens, score));
            } else {
                tokens.push(tok);
                next.push(Hyp { tokens, score, state });
            }
        }
        next.sort_by(|a, b| better(a.score, &a.tokens, b.score, &b.tokens));
        next.truncate(beam);
        live = next;
        let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.first().map_or(f64::NEG_INFINITY, |h| h.score);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }
    if let Some((tokens, score)) = finished
        .into_iter()
        .min_by(|a, b| better(a.1, &a.0, b.1, &b.0))
    {
        return Ok(BeamResult {
            tokens,
            score,
            finished: true,
        });
    }
    let best = live
        .into_iter()
        .next()
        .ok_or_else(|| Error::numeric("beam search produced no hypothesis"))?;
    log::warn!("no hypothesis finished within {max_len} tokens");
    Ok(BeamResult {
        tokens: best.tokens,
        score: best.score,
        finished: false,
    })
}
