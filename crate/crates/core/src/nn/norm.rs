use super::{Linear, ParamBuilder};
use crate::error::{PmnError, Result};
use crate::tensor::{ParamId, ParameterSet, Tape, Tensor, Var};
use std::collections::BTreeMap;

const NORM_EPS: f64 = 1e-5;

/// Per-feature normalization with running statistics.
///
/// Forward always normalizes with the stored running mean and variance (held
/// constant on the tape), so a single sample gives the same output in training
/// and evaluation. Training records the inputs it saw; the harness folds them
/// into the running buffers via [`update_norm_stats`].
#[derive(Clone, Debug)]
pub struct AffineNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub dim: usize,
}

impl AffineNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(AffineNorm {
            gamma: pb.filled(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: pb.filled(&format!("{name}.beta"), &[dim], 0.0)?,
            mean: pb.buffer(&format!("{name}.mean"), Tensor::zeros(&[dim]))?,
            var: pb.buffer(&format!("{name}.var"), Tensor::vector(vec![1.0; dim]))?,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != [self.dim] {
            return Err(PmnError::shape("affine_norm", tape.shape(x), &[self.dim]));
        }
        let params = tape
            .params()
            .ok_or_else(|| PmnError::invalid("affine_norm", "tape has no parameter set"))?;
        let mean = params.value(self.mean).data();
        let inv_std: Vec<f64> = params
            .value(self.var)
            .data()
            .iter()
            .map(|v| 1.0 / (v + NORM_EPS).sqrt())
            .collect();
        if tape.collects_stats() {
            let seen = tape.value(x).to_vec();
            tape.record_stat(self.mean, seen);
        }
        let mean = tape.constant_vec(mean.to_vec());
        let inv_std = tape.constant_vec(inv_std);
        let centered = tape.sub(x, mean)?;
        let normed = tape.mul(centered, inv_std)?;
        let gamma = tape.param(self.gamma)?;
        let beta = tape.param(self.beta)?;
        let scaled = tape.mul(normed, gamma)?;
        tape.add(scaled, beta)
    }
}

/// Folds recorded activations into running statistics with the given
/// momentum. Observations are keyed by the mean buffer; the variance buffer is
/// found by name. Statistics of normalizers whose `gamma` is frozen are left
/// untouched, so a frozen module stays byte-identical.
pub fn update_norm_stats(
    params: &mut ParameterSet,
    stats: &[(ParamId, Vec<f64>)],
    momentum: f64,
) -> Result<()> {
    let mut grouped: BTreeMap<ParamId, Vec<&[f64]>> = BTreeMap::new();
    for (id, xs) in stats {
        grouped.entry(*id).or_default().push(xs);
    }
    for (mean_id, obs) in grouped {
        let name = params.name(mean_id).to_string();
        let base = name
            .strip_suffix(".mean")
            .ok_or_else(|| PmnError::Invariant(format!("`{name}` is not a running-mean buffer")))?;
        let gamma = params.require(&format!("{base}.gamma"))?;
        if !params.is_trainable(gamma) {
            continue;
        }
        let var_id = params.require(&format!("{base}.var"))?;
        let dim = params.value(mean_id).len();
        let n = obs.len() as f64;
        let mut mu = vec![0.0; dim];
        for o in &obs {
            mu.iter_mut().zip(o.iter()).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; dim];
        for o in &obs {
            var.iter_mut()
                .zip(o.iter().zip(&mu))
                .for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n);
        }
        let mean_buf = params.value_mut(mean_id).data_mut();
        for (b, m) in mean_buf.iter_mut().zip(&mu) {
            *b = (1.0 - momentum) * *b + momentum * m;
        }
        if obs.len() > 1 {
            let var_buf = params.value_mut(var_id).data_mut();
            for (b, v) in var_buf.iter_mut().zip(&var) {
                *b = (1.0 - momentum) * *b + momentum * v;
            }
        }
    }
    Ok(())
}

/// Receiver projection: linear, affine normalization, tanh.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
    pub norm: AffineNorm,
}

impl Projection {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Projection {
            linear: Linear::new(pb, &format!("{name}.lin"), in_dim, out_dim, true)?,
            norm: AffineNorm::new(pb, &format!("{name}.norm"), out_dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.linear.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        Ok(tape.tanh(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_move_toward_batch_and_respect_freezing() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let norm = AffineNorm::new(&mut ParamBuilder::new(&mut ps, &mut rng), "n", 2).unwrap();
        let mut seen = Vec::new();
        for x in [[1.0, 3.0], [3.0, 3.0]] {
            let mut tape = Tape::new(&ps);
            tape.set_collect_stats(true);
            let xv = tape.constant(&Tensor::vector(x.to_vec()));
            norm.forward(&mut tape, xv).unwrap();
            seen.extend(tape.take_stats());
        }
        let mut frozen = ps.clone();
        frozen.set_trainable(norm.gamma, false);
        update_norm_stats(&mut frozen, &seen, 0.5).unwrap();
        assert_eq!(frozen.value(norm.mean).data(), &[0.0, 0.0]);

        update_norm_stats(&mut ps, &seen, 0.5).unwrap();
        assert_eq!(ps.value(norm.mean).data(), &[1.0, 1.5]);
        assert_eq!(ps.value(norm.var).data(), &[1.0, 0.5]);
    }
}
