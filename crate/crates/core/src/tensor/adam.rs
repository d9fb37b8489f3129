use super::params::{ParamGrads, ParamKind, ParameterSet};
use crate::error::{PmnError, Result};
use serde::{Deserialize, Serialize};

/// Adam with bias correction. Moments and step counters live on the
/// [`ParameterSet`] so that a frozen entry's optimizer state never advances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }

    /// Updates every trainable weight. Buffers and frozen entries are skipped
    /// entirely; a trainable weight without a gradient is an error and leaves
    /// the whole set untouched.
    pub fn step(&self, params: &mut ParameterSet, grads: &ParamGrads) -> Result<()> {
        let ids: Vec<_> = params
            .ids()
            .filter(|&id| params.is_trainable(id) && params.kind(id) == ParamKind::Weight)
            .collect();
        for &id in &ids {
            match grads.get(id) {
                None => return Err(PmnError::MissingGradient(params.name(id).to_string())),
                Some(g) if g.len() != params.value(id).len() => {
                    return Err(PmnError::shape(
                        "adam",
                        params.value(id).shape(),
                        &[g.len()],
                    ));
                }
                Some(_) => {}
            }
        }
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let e = params.entry_mut(id);
            e.t += 1;
            let bc1 = 1.0 - self.beta1.powi(e.t as i32);
            let bc2 = 1.0 - self.beta2.powi(e.t as i32);
            let data = e.value.data_mut();
            for i in 0..data.len() {
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g[i];
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = e.m[i] / bc1;
                let v_hat = e.v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
