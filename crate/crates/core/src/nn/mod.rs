//! Differentiable building blocks. Each block only stores [`ParamId`]s; the
//! values live in a shared [`ParameterSet`] so freezing and checkpointing act
//! on one store.

mod attention;
mod check;
mod gru;
mod norm;

pub use attention::{AttentionMode, SoftAttention};
pub use check::check_blocks;
pub use gru::GruCell;
pub use norm::{update_norm_stats, AffineNorm, Projection};

use crate::error::{PmnError, Result};
use crate::tensor::{init_uniform, ParamId, ParamKind, ParameterSet, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Creates named parameters in a set with seeded initialization.
pub struct ParamBuilder<'a> {
    pub params: &'a mut ParameterSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(params: &'a mut ParameterSet, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { params, rng }
    }

    pub fn weight(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<ParamId> {
        let t = init_uniform(self.rng, shape, fan_in, fan_out);
        self.params.add(name, t, ParamKind::Weight)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|x| *x = value);
        self.params.add(name, t, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.params.add(name, value, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        }
    }
}

fn last_dim(tape: &Tape, x: Var) -> usize {
    *tape.shape(x).last().unwrap_or(&1)
}

/// `y = x·W + b` with `W` stored as `[in, out]`. Accepts a vector `[in]` or a
/// row batch `[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = pb.weight(&format!("{name}.w"), &[in_dim, out_dim], in_dim, out_dim)?;
        let b = if bias {
            Some(pb.filled(&format!("{name}.b"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if last_dim(tape, x) != self.in_dim {
            return Err(PmnError::shape(
                "linear",
                tape.shape(x),
                &[self.in_dim, self.out_dim],
            ));
        }
        let w = tape.param(self.w)?;
        let y = tape.matmul(x, w)?;
        let Some(b) = self.b else { return Ok(y) };
        let b = tape.param(b)?;
        match tape.shape(y).len() {
            1 => tape.add(y, b),
            _ => {
                let rows = tape.shape(y)[0];
                let bb = tape.expand_rows(b, rows)?;
                tape.add(y, bb)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `sizes` lists every extent from input to output; `acts` has one entry
    /// per layer.
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        sizes: &[usize],
        acts: &[Activation],
    ) -> Result<Self> {
        if sizes.len() < 2 || acts.len() != sizes.len() - 1 {
            return Err(PmnError::invalid(
                "mlp",
                format!(
                    "{} sizes need {} activations, got {}",
                    sizes.len(),
                    sizes.len().saturating_sub(1),
                    acts.len()
                ),
            ));
        }
        let layers = sizes
            .windows(2)
            .zip(acts)
            .enumerate()
            .map(|(i, (w, &a))| {
                Ok((
                    Linear::new(pb, &format!("{name}.{i}"), w[0], w[1], true)?,
                    a,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").0.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        for (lin, act) in &self.layers {
            x = lin.forward(tape, x)?;
            x = act.apply(tape, x);
        }
        Ok(x)
    }
}

/// `tanh(W₁x) ⊙ σ(W₂x)`.
#[derive(Clone, Debug)]
pub struct GatedTanh {
    pub a: Linear,
    pub b: Linear,
}

impl GatedTanh {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(GatedTanh {
            a: Linear::new(pb, &format!("{name}.a"), in_dim, out_dim, true)?,
            b: Linear::new(pb, &format!("{name}.b"), in_dim, out_dim, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.a.forward(tape, x)?;
        let a = tape.tanh(a);
        let b = self.b.forward(tape, x)?;
        let b = tape.sigmoid(b);
        tape.mul(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        let table = pb.weight(&format!("{name}.table"), &[vocab, dim], vocab, dim)?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn lookup(&self, tape: &mut Tape, index: usize) -> Result<Var> {
        if index >= self.vocab {
            return Err(PmnError::invalid(
                "embedding",
                format!("index {index} out of vocabulary of size {}", self.vocab),
            ));
        }
        let t = tape.param(self.table)?;
        tape.row(t, index)
    }

    /// Expected embedding under a distribution over the vocabulary.
    pub fn soft_lookup(&self, tape: &mut Tape, probs: Var) -> Result<Var> {
        let t = tape.param(self.table)?;
        tape.matmul(probs, t)
    }
}
