use rand::Rng;

use super::{ParamId, ParameterSet, Tape, Tensor, Var};
use crate::{Error, Result};

/// Hidden and cell state of an LSTM.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::vector(vec![0.0; hidden])),
            c: tape.constant(Tensor::vector(vec![0.0; hidden])),
        }
    }
}

/// Weights of one LSTM layer. `w` is `[4H, I + H]` acting on `[x; h]`,
/// gates ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmWeights {
    /// Registers `{name}.w` and `{name}.b`. The forget-gate bias starts at 1.
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = ps.add_uniform(&format!("{name}.w"), vec![4 * hidden, input + hidden], scale, rng)?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let b = ps.add(&format!("{name}.b"), Tensor::vector(bias))?;
        Ok(LstmWeights {
            w,
            b,
            input,
            hidden,
        })
    }
}

/// One LSTM step: `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    ps: &ParameterSet,
    weights: &LstmWeights,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let hd = weights.hidden;
    if tape.shape(x) != [weights.input] || tape.shape(state.h) != [hd] || tape.shape(state.c) != [hd] {
        return Err(Error::shape(
            "lstm_cell",
            format!(
                "input {:?}, h {:?}, c {:?} for an LSTM with input {} and hidden {hd}",
                tape.shape(x),
                tape.shape(state.h),
                tape.shape(state.c),
                weights.input
            ),
        ));
    }
    let w = tape.param(ps, weights.w);
    let b = tape.param(ps, weights.b);
    let xh = tape.concat(&[x, state.h])?;
    let pre = tape.matmul(w, xh)?;
    let pre = tape.add(pre, b)?;
    let i = tape.slice(pre, 0, hd)?;
    let f = tape.slice(pre, hd, hd)?;
    let g = tape.slice(pre, 2 * hd, hd)?;
    let o = tape.slice(pre, 3 * hd, hd)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        input: usize,
        output: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = ps.add_uniform(&format!("{name}.w"), vec![output, input], scale, rng)?;
        let b = ps.add_zeros(&format!("{name}.b"), vec![output])?;
        Ok(Linear {
            w,
            b,
            input,
            output,
        })
    }

    pub fn apply(&self, tape: &mut Tape, ps: &ParameterSet, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        let y = tape.matmul(w, x)?;
        tape.add(y, b)
    }
}

/// Encoder hidden states prepared for repeated attention queries.
#[derive(Debug, Clone, Copy)]
pub struct EncoderMemory {
    states: Var,
    states_t: Var,
}

impl EncoderMemory {
    pub fn new(tape: &mut Tape, states: &[Var]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::shape("attention", "empty encoder sequence"));
        }
        let states = tape.stack(states)?;
        let states_t = tape.transpose(states)?;
        Ok(EncoderMemory { states, states_t })
    }

    /// The `[T, H]` matrix of states.
    pub fn states(&self) -> Var {
        self.states
    }
}

/// Bilinear attention `s_j = h_decᵀ Aᵀ h_enc_j`; returns the context vector
/// and the attention weights. `a` is `[H_enc, H_dec]`.
pub fn attention(
    tape: &mut Tape,
    ps: &ParameterSet,
    a: ParamId,
    decoder_state: Var,
    memory: &EncoderMemory,
) -> Result<(Var, Var)> {
    let a = tape.param(ps, a);
    let u = tape.matmul(a, decoder_state)?;
    let scores = tape.matmul(memory.states, u)?;
    let alpha = tape.softmax(scores)?;
    let ctx = tape.matmul(memory.states_t, alpha)?;
    Ok((ctx, alpha))
}
