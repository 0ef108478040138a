use rand::Rng;

use crate::corpus::TokenSeq;
use crate::tensor::{attention, lstm_cell, EncoderMemory, Linear, LstmState, LstmWeights, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::{Error, Result};

use super::{ModelConfig, StepModel};

/// Attentional LSTM encoder-decoder p(x | t, z). The edit vector sets the
/// decoder's initial hidden state and is appended to every decoder input.
#[derive(Debug, Clone, Copy)]
pub struct Editor {
    /// Token embedding, also read by the inverse editor.
    pub embed: ParamId,
    pub encoder: LstmWeights,
    pub decoder: LstmWeights,
    pub z_to_h: Linear,
    pub attn: ParamId,
    pub out: Linear,
    pub z_dim: usize,
}

impl Editor {
    pub fn new(ps: &mut ParameterSet, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (v, e, h, s) = (cfg.vocab_size, cfg.word_dim, cfg.hidden_dim, cfg.init_scale);
        Ok(Editor {
            embed: ps.add_uniform("editor.embed", vec![v, e], s, rng)?,
            encoder: LstmWeights::new(ps, "editor.encoder", e, h, s, rng)?,
            decoder: LstmWeights::new(ps, "editor.decoder", e + cfg.z_dim, h, s, rng)?,
            z_to_h: Linear::new(ps, "editor.z_to_h", cfg.z_dim, h, s, rng)?,
            attn: ps.add_uniform("editor.attn", vec![h, h], s, rng)?,
            out: Linear::new(ps, "editor.out", 2 * h, v, s, rng)?,
            z_dim: cfg.z_dim,
        })
    }

    /// Runs the encoder over the prototype, markers included.
    pub fn encode(&self, tape: &mut Tape, ps: &ParameterSet, t: &TokenSeq) -> Result<EncoderMemory> {
        let table = tape.param(ps, self.embed);
        let mut state = LstmState::zeros(tape, self.encoder.hidden);
        let mut states = Vec::with_capacity(t.ids().len());
        for &tok in t.ids() {
            let x = tape.row(table, tok)?;
            state = lstm_cell(tape, ps, &self.encoder, x, state)?;
            states.push(state.h);
        }
        EncoderMemory::new(tape, &states)
    }

    pub fn initial_state(&self, tape: &mut Tape, ps: &ParameterSet, z: Var) -> Result<LstmState> {
        if tape.shape(z) != [self.z_dim] {
            return Err(Error::shape("editor", format!("edit vector of shape {:?}", tape.shape(z))));
        }
        let pre = self.z_to_h.apply(tape, ps, z)?;
        let h = tape.tanh(pre);
        let c = tape.constant(Tensor::vector(vec![0.0; self.decoder.hidden]));
        Ok(LstmState { h, c })
    }

    /// Feeds `token` and returns the new state and next-token
    /// log-probabilities.
    pub fn step(
        &self,
        tape: &mut Tape,
        ps: &ParameterSet,
        memory: &EncoderMemory,
        z: Var,
        state: LstmState,
        token: usize,
    ) -> Result<(LstmState, Var)> {
        let table = tape.param(ps, self.embed);
        let emb = tape.row(table, token)?;
        let input = tape.concat(&[emb, z])?;
        let state = lstm_cell(tape, ps, &self.decoder, input, state)?;
        let (ctx, _) = attention(tape, ps, self.attn, state.h, memory)?;
        let feat = tape.concat(&[state.h, ctx])?;
        let logits = self.out.apply(tape, ps, feat)?;
        let logp = tape.log_softmax(logits)?;
        Ok((state, logp))
    }

    /// Teacher-forced log p(x | t, z), summed over the tokens of `x` and its
    /// end marker.
    pub fn log_prob(&self, tape: &mut Tape, ps: &ParameterSet, x: &TokenSeq, t: &TokenSeq, z: Var) -> Result<Var> {
        let memory = self.encode(tape, ps, t)?;
        let mut state = self.initial_state(tape, ps, z)?;
        let ids = x.ids();
        let mut terms = Vec::with_capacity(ids.len() - 1);
        for w in ids.windows(2) {
            let (next, logp) = self.step(tape, ps, &memory, z, state, w[0])?;
            state = next;
            terms.push(tape.pick(logp, w[1])?);
        }
        tape.sum_scalars(&terms)
    }

    /// log p(x | t, z) without keeping the tape.
    pub fn log_prob_value(&self, ps: &ParameterSet, x: &TokenSeq, t: &TokenSeq, z: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::vector(z.to_vec()));
        let lp = self.log_prob(&mut tape, ps, x, t, zv)?;
        Ok(tape.scalar(lp))
    }

    /// Incremental decoder for generation.
    pub fn decoder<'a>(&'a self, ps: &'a ParameterSet, t: &TokenSeq, z: &[f64]) -> Result<EditorDecoder<'a>> {
        let mut tape = Tape::new();
        let memory = self.encode(&mut tape, ps, t)?;
        let z = tape.constant(Tensor::vector(z.to_vec()));
        Ok(EditorDecoder {
            editor: self,
            ps,
            tape,
            memory,
            z,
        })
    }
}

/// Step-by-step decoding state of an [`Editor`] for one prototype and edit
/// vector.
pub struct EditorDecoder<'a> {
    editor: &'a Editor,
    ps: &'a ParameterSet,
    tape: Tape,
    memory: EncoderMemory,
    z: Var,
}

impl StepModel for EditorDecoder<'_> {
    type State = LstmState;

    fn start(&mut self) -> Result<LstmState> {
        self.editor.initial_state(&mut self.tape, self.ps, self.z)
    }

    fn step(&mut self, state: &LstmState, token: usize) -> Result<(LstmState, Vec<f64>)> {
        let (next, logp) = self.editor.step(&mut self.tape, self.ps, &self.memory, self.z, *state, token)?;
        Ok((next, self.tape.value(logp).to_vec()))
    }
}
