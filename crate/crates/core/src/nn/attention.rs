use super::{Linear, ParamBuilder};
use crate::error::{PmnError, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Softmax,
    Sigmoid,
}

/// Scores items against a key: `z(relu(f(key)) ⊙ relu(g(item_i)))`, where
/// `z` maps the joint vector to one number per item.
#[derive(Clone, Debug)]
pub struct SoftAttention {
    pub f: Linear,
    pub g: Linear,
    pub z: Linear,
    pub mode: AttentionMode,
}

impl SoftAttention {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        key_dim: usize,
        item_dim: usize,
        joint_dim: usize,
        mode: AttentionMode,
    ) -> Result<Self> {
        Ok(SoftAttention {
            f: Linear::new(pb, &format!("{name}.f"), key_dim, joint_dim, true)?,
            g: Linear::new(pb, &format!("{name}.g"), item_dim, joint_dim, true)?,
            z: Linear::new(pb, &format!("{name}.z"), joint_dim, 1, true)?,
            mode,
        })
    }

    /// Unnormalized scores, one per row of `items` (`[N, item_dim]`).
    pub fn logits(&self, tape: &mut Tape, key: Var, items: Var) -> Result<Var> {
        let n = match tape.shape(items) {
            [n, _] => *n,
            s => {
                return Err(PmnError::invalid(
                    "attend",
                    format!("items must be a matrix, got {s:?}"),
                ))
            }
        };
        let fk = self.f.forward(tape, key)?;
        let fk = tape.relu(fk);
        let gd = self.g.forward(tape, items)?;
        let gd = tape.relu(gd);
        let fk = tape.expand_rows(fk, n)?;
        let joint = tape.mul(fk, gd)?;
        let s = self.z.forward(tape, joint)?;
        tape.reshape(s, &[n])
    }

    pub fn attend(&self, tape: &mut Tape, key: Var, items: Var) -> Result<Var> {
        let l = self.logits(tape, key, items)?;
        Ok(match self.mode {
            AttentionMode::Softmax => tape.softmax(l, 0)?,
            AttentionMode::Sigmoid => tape.sigmoid(l),
        })
    }

    /// Same as [`attend`](Self::attend) for items given as separate vectors.
    pub fn attend_items(&self, tape: &mut Tape, key: Var, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(PmnError::invalid("attend", "empty item list"));
        }
        let m = tape.stack(items)?;
        self.attend(tape, key, m)
    }
}
