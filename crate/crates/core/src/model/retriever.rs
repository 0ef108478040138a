use crate::corpus::PrototypeLibrary;
use crate::tensor::{ParamId, ParameterSet, Tape, Tensor, Var};
use crate::{Error, Result};

use super::ModelConfig;

/// Bilinear retriever: `h(x_k, x) = Embed(x_k)ᵀ W Embed(x) / μ`, softmaxed
/// over the candidate prototypes.
#[derive(Debug, Clone, Copy)]
pub struct Retriever {
    pub w: ParamId,
    pub temperature: f64,
}

/// Log-probabilities over a candidate subset of the library.
#[derive(Debug, Clone)]
pub struct RetrieverOutput {
    /// Library positions in the order of `log_probs`.
    pub candidates: Vec<usize>,
    /// Tape handle of the candidate log-probabilities.
    pub log_probs: Var,
}

impl Retriever {
    /// W starts at the identity.
    pub fn new(ps: &mut ParameterSet, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.sentence_dim;
        let mut w = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        let w = ps.add("retriever.w", w)?;
        Ok(Retriever {
            w,
            temperature: cfg.temperature,
        })
    }

    /// Raw scores for every library entry.
    pub fn scores(&self, tape: &mut Tape, ps: &ParameterSet, library: &PrototypeLibrary, x_emb: &[f64]) -> Result<Var> {
        if x_emb.len() != library.dim() {
            return Err(Error::shape(
                "retriever",
                format!("query of dimension {} for library of dimension {}", x_emb.len(), library.dim()),
            ));
        }
        let w = tape.param(ps, self.w);
        let x = tape.constant(Tensor::vector(x_emb.to_vec()));
        let u = tape.matmul(w, x)?;
        let e = tape.constant(Tensor::matrix(library.len(), library.dim(), library.embedding_matrix().to_vec())?);
        let s = tape.matmul(e, u)?;
        Ok(tape.scale(s, 1.0 / self.temperature))
    }

    /// Log q(t|x) over `candidates` (library positions); `None` means the
    /// whole library.
    pub fn log_probs_over(
        &self,
        tape: &mut Tape,
        ps: &ParameterSet,
        library: &PrototypeLibrary,
        x_emb: &[f64],
        candidates: Option<&[usize]>,
    ) -> Result<RetrieverOutput> {
        let scores = self.scores(tape, ps, library, x_emb)?;
        let (candidates, picked) = match candidates {
            None => ((0..library.len()).collect(), scores),
            Some([]) => {
                return Err(Error::config("retriever has no candidate prototypes"));
            }
            Some(c) => (c.to_vec(), tape.gather(scores, c)?),
        };
        let log_probs = tape.log_softmax(picked)?;
        Ok(RetrieverOutput {
            candidates,
            log_probs,
        })
    }

    /// Training-time distribution: if `x_index` (a training-split index)
    /// is a library member it is excluded and the rest renormalise.
    pub fn log_probs(
        &self,
        tape: &mut Tape,
        ps: &ParameterSet,
        library: &PrototypeLibrary,
        x_index: Option<usize>,
        x_emb: &[f64],
    ) -> Result<RetrieverOutput> {
        match x_index.and_then(|i| library.position_of(i)) {
            None => self.log_probs_over(tape, ps, library, x_emb, None),
            Some(own) => {
                let rest: Vec<usize> = (0..library.len()).filter(|&k| k != own).collect();
                if rest.is_empty() {
                    return Err(Error::config("library is empty after excluding the example itself"));
                }
                self.log_probs_over(tape, ps, library, x_emb, Some(&rest))
            }
        }
    }

    /// Dense probability vector over the whole library (zero where
    /// excluded).
    pub fn dense_probs(tape: &Tape, out: &RetrieverOutput, library_size: usize) -> Vec<f64> {
        let mut q = vec![0.0; library_size];
        for (&k, lp) in out.candidates.iter().zip(tape.value(out.log_probs)) {
            q[k] = lp.exp();
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::tiny_config;

    fn library(rows: Vec<Vec<f64>>) -> PrototypeLibrary {
        let idx = (0..rows.len()).map(|i| i * 10).collect();
        PrototypeLibrary::new(idx, &rows).unwrap()
    }

    fn retriever(d: usize, temp: f64) -> (ParameterSet, Retriever) {
        let mut cfg = tiny_config(10, 5);
        cfg.sentence_dim = d;
        cfg.temperature = temp;
        let mut ps = ParameterSet::new();
        let r = Retriever::new(&mut ps, &cfg).unwrap();
        (ps, r)
    }

    #[test]
    fn zero_w_is_uniform_over_unmasked() {
        let (mut ps, r) = retriever(2, 0.3);
        ps.value_mut(r.w).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let lib = library(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![-1.0, 2.0]]);
        let mut tape = Tape::new();
        let out = r.log_probs(&mut tape, &ps, &lib, Some(20), &[0.3, 0.1]).unwrap();
        let q = Retriever::dense_probs(&tape, &out, 4);
        assert_eq!(q[2], 0.0);
        for k in [0, 1, 3] {
            assert!((q[k] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_softmax() {
        let (ps, r) = retriever(2, 0.5);
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 0.5],
            vec![0.2, -0.3],
        ];
        let lib = library(rows.clone());
        let x = [0.4, -0.8];
        let mut tape = Tape::new();
        let out = r.log_probs(&mut tape, &ps, &lib, None, &x).unwrap();
        let s: Vec<f64> = rows.iter().map(|e| (e[0] * x[0] + e[1] * x[1]) / 0.5).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for (lp, sv) in tape.value(out.log_probs).iter().zip(&s) {
            assert!((lp - (sv.exp() / z).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn halving_temperature_doubles_gaps() {
        let lib = library(vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![0.7, 0.7]]);
        let x = [0.9, 0.1];
        let (ps, r1) = retriever(2, 1.0);
        let (_, r2) = retriever(2, 0.5);
        let mut tape = Tape::new();
        let s1 = r1.scores(&mut tape, &ps, &lib, &x).unwrap();
        let s2 = r2.scores(&mut tape, &ps, &lib, &x).unwrap();
        let (a, b) = (tape.value(s1).to_vec(), tape.value(s2).to_vec());
        for i in 0..3 {
            for j in 0..3 {
                assert!(((b[i] - b[j]) - 2.0 * (a[i] - a[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_embeddings_matches_rescaled_temperature() {
        let rows = vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![0.7, -0.7]];
        let c = 3.5;
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let x = [0.9, 0.1];
        let (ps, r1) = retriever(2, 0.4);
        let (_, r2) = retriever(2, 0.4 * c);
        let mut tape = Tape::new();
        let a = r1.log_probs(&mut tape, &ps, &library(rows), None, &x).unwrap();
        let b = r2.log_probs(&mut tape, &ps, &library(scaled), None, &x).unwrap();
        for (u, v) in tape.value(a.log_probs).iter().zip(tape.value(b.log_probs)) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn single_member_library_cannot_exclude_itself() {
        let (ps, r) = retriever(2, 0.3);
        let lib = library(vec![vec![1.0, 0.0]]);
        let mut tape = Tape::new();
        assert!(matches!(
            r.log_probs(&mut tape, &ps, &lib, Some(0), &[1.0, 0.0]),
            Err(Error::Config(_))
        ));
    }
}
