//! Minimal reverse-mode differentiation for small recurrent models.
//!
//! A [`Tape`] records every operation of a forward pass; calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! adjoints for every leaf. Trainable weights live in a [`ParameterSet`]
//! and enter a tape through [`Tape::param`]; their gradients are folded
//! back into the set with [`ParameterSet::accumulate`].
//!
//! Values are `f64` and tensors have rank at most 3.

mod nn;
mod params;
mod tape;

pub use nn::{attention, lstm_cell, EncoderMemory, Linear, LstmState, LstmWeights};
pub use params::{AdamConfig, Param, ParamId, ParameterSet};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense row-major array of rank 0 to 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::shape("tensor", format!("rank {} exceeds 3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}
