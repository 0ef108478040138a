use rand::Rng;

use crate::align::{AlignedTriple, EditOp};
use crate::tensor::{lstm_cell, Linear, LstmState, LstmWeights, ParamId, ParameterSet, Tape, Var};
use crate::Result;

use super::ModelConfig;

/// Maps an aligned (prototype, example) pair to the unit mean direction of
/// q(z | t, x).
#[derive(Debug, Clone, Copy)]
pub struct InverseEditor {
    /// Shared with the editor.
    pub embed: ParamId,
    /// One row per [`EditOp`].
    pub op_embed: ParamId,
    pub lstm: LstmWeights,
    pub proj: Linear,
}

impl InverseEditor {
    pub fn new(ps: &mut ParameterSet, cfg: &ModelConfig, embed: ParamId, rng: &mut impl Rng) -> Result<Self> {
        let (e, h, s) = (cfg.word_dim, cfg.hidden_dim, cfg.init_scale);
        Ok(InverseEditor {
            embed,
            op_embed: ps.add_uniform("inverse_editor.op_embed", vec![EditOp::ALL.len(), cfg.op_dim], s, rng)?,
            lstm: LstmWeights::new(ps, "inverse_editor.lstm", 2 * e + cfg.op_dim, h, s, rng)?,
            proj: Linear::new(ps, "inverse_editor.proj", h, cfg.z_dim, s, rng)?,
        })
    }

    pub fn mean(&self, tape: &mut Tape, ps: &ParameterSet, triple: &AlignedTriple) -> Result<Var> {
        let words = tape.param(ps, self.embed);
        let ops = tape.param(ps, self.op_embed);
        let mut state = LstmState::zeros(tape, self.lstm.hidden);
        for ((&tp, &xp), &op) in triple.prototype.iter().zip(&triple.example).zip(&triple.ops) {
            let a = tape.row(words, tp)?;
            let b = tape.row(words, xp)?;
            let o = tape.row(ops, op.index())?;
            let input = tape.concat(&[a, b, o])?;
            state = lstm_cell(tape, ps, &self.lstm, input, state)?;
        }
        let raw = self.proj.apply(tape, ps, state.h)?;
        tape.l2_normalize(raw)
    }

    pub fn mean_value(&self, ps: &ParameterSet, triple: &AlignedTriple) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mu = self.mean(&mut tape, ps, triple)?;
        Ok(tape.value(mu).to_vec())
    }
}
