use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EmbeddingTable, TokenSeq, Vocabulary};
use crate::tensor::{lstm_cell, Linear, LstmState, LstmWeights, ParamId, ParameterSet, Tape, Var};
use crate::Result;

use super::{ModelConfig, StepModel};

/// LSTM language model with the editor decoder's sizes but no prototype or
/// edit vector.
#[derive(Debug, Clone)]
pub struct Nlm {
    pub params: ParameterSet,
    pub embed: ParamId,
    pub lstm: LstmWeights,
    pub out: Linear,
}

impl Nlm {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let (v, e, h, s) = (cfg.vocab_size, cfg.word_dim, cfg.hidden_dim, cfg.init_scale);
        let embed = ps.add_uniform("nlm.embed", vec![v, e], s, &mut rng)?;
        let lstm = LstmWeights::new(&mut ps, "nlm.lstm", e, h, s, &mut rng)?;
        let out = Linear::new(&mut ps, "nlm.out", h, v, s, &mut rng)?;
        Ok(Nlm {
            params: ps,
            embed,
            lstm,
            out,
        })
    }

    pub fn init_word_embeddings(&mut self, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<usize> {
        super::copy_word_vectors(&mut self.params, self.embed, vocab, table)
    }

    pub fn vocab_size(&self) -> usize {
        self.params.value(self.embed).shape()[0]
    }

    fn step(&self, tape: &mut Tape, state: LstmState, token: usize) -> Result<(LstmState, Var)> {
        let table = tape.param(&self.params, self.embed);
        let emb = tape.row(table, token)?;
        let state = lstm_cell(tape, &self.params, &self.lstm, emb, state)?;
        let logits = self.out.apply(tape, &self.params, state.h)?;
        let logp = tape.log_softmax(logits)?;
        Ok((state, logp))
    }

    /// Teacher-forced log p(x), end marker included.
    pub fn log_prob(&self, tape: &mut Tape, x: &TokenSeq) -> Result<Var> {
        let mut state = LstmState::zeros(tape, self.lstm.hidden);
        let mut terms = Vec::with_capacity(x.ids().len() - 1);
        for w in x.ids().windows(2) {
            let (next, logp) = self.step(tape, state, w[0])?;
            state = next;
            terms.push(tape.pick(logp, w[1])?);
        }
        tape.sum_scalars(&terms)
    }

    pub fn log_prob_value(&self, x: &TokenSeq) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = self.log_prob(&mut tape, x)?;
        Ok(tape.scalar(lp))
    }

    pub fn decoder(&self) -> NlmDecoder<'_> {
        NlmDecoder {
            nlm: self,
            tape: Tape::new(),
        }
    }
}

pub struct NlmDecoder<'a> {
    nlm: &'a Nlm,
    tape: Tape,
}

impl StepModel for NlmDecoder<'_> {
    type State = LstmState;

    fn start(&mut self) -> Result<LstmState> {
        Ok(LstmState::zeros(&mut self.tape, self.nlm.lstm.hidden))
    }

    fn step(&mut self, state: &LstmState, token: usize) -> Result<(LstmState, Vec<f64>)> {
        let (next, logp) = self.nlm.step(&mut self.tape, *state, token)?;
        Ok((next, self.tape.value(logp).to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS, EOS};
    use crate::model::testing::tiny_config;

    #[test]
    fn nonpositive_and_normalised() {
        let nlm = Nlm::new(&tiny_config(6, 1), 3).unwrap();
        let x = TokenSeq::from_inner(&[4, 5, 5]);
        assert!(nlm.log_prob_value(&x).unwrap() <= 0.0);
        let mut d = nlm.decoder();
        let s = d.start().unwrap();
        let (_, lp) = d.step(&s, BOS).unwrap();
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn total_mass_over_short_sequences() {
        let v = 5;
        let nlm = Nlm::new(&tiny_config(v, 1), 8).unwrap();
        let score = |inner: &[usize]| nlm.log_prob_value(&TokenSeq::from_inner(inner)).unwrap().exp();
        let mut total = score(&[]);
        let mut d = nlm.decoder();
        let s0 = d.start().unwrap();
        let (s1, lp1) = d.step(&s0, BOS).unwrap();
        for w in (0..v).filter(|&w| w != EOS) {
            total += score(&[w]);
            let (_, lp2) = d.step(&s1, w).unwrap();
            for u in (0..v).filter(|&u| u != EOS) {
                total += (lp1[w] + lp2[u]).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }
}
