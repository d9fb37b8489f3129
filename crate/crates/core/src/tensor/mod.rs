//! Dense tensors, the reverse-mode tape, parameter storage and the Adam optimizer.
//!
//! Everything numeric in the crate flows through [`Tape`]: parameters are loaded
//! as borrowed leaves, operations append nodes, and [`Tape::backward`] walks the
//! node list in reverse to produce a [`Gradients`] value.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use adam::Adam;
pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use params::{init_uniform, ParamGrads, ParamId, ParamKind, ParameterSet};
pub use tape::{Gradients, Tape, Var};

use crate::error::{PmnError, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense `f64` tensor. An empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(PmnError::invalid(
                "tensor",
                format!("zero extent in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PmnError::invalid(
                "tensor",
                format!("shape {shape:?} implies {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: Vec::new(),
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
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut data = vec![0.0; n];
        data[index] = 1.0;
        Tensor::vector(data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.data)
    }
}

pub(crate) fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}
