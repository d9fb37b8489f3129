use super::ScratchPad;
use crate::error::{PmnError, Result};
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupNorm {
    Softmax,
    Sigmoid,
}

/// Children whose importance scores are normalized together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateGroup {
    pub name: String,
    pub members: Vec<String>,
    pub norm: GroupNorm,
}

impl GateGroup {
    pub fn softmax(name: &str, members: &[&str]) -> Self {
        GateGroup {
            name: name.to_string(),
            members: members.iter().map(|s| s.to_string()).collect(),
            norm: GroupNorm::Softmax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    Learned,
    /// All logits are zero, so every softmax group weighs its members equally.
    FixedEqual,
}

/// Importance logits of one time step, one per child slot in list order.
pub struct Gates<'g> {
    pub logits: Var,
    pub slots: &'g [String],
    pub groups: &'g [GateGroup],
}

impl Gates<'_> {
    fn group(&self, name: &str) -> Result<&GateGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| PmnError::invalid("gates", format!("unknown group `{name}`")))
    }

    fn member_logits(&self, tape: &mut Tape, group: &GateGroup) -> Result<Var> {
        if group.members.is_empty() {
            return Err(PmnError::EmptyGroup(group.name.clone()));
        }
        let mut parts = Vec::with_capacity(group.members.len());
        for m in &group.members {
            let i =
                self.slots.iter().position(|s| s == m).ok_or_else(|| {
                    PmnError::invalid("gates", format!("`{m}` is not a child slot"))
                })?;
            parts.push(tape.slice(self.logits, 0, i, 1)?);
        }
        tape.concat(&parts, 0)
    }

    /// Normalized weights of a group, in member order.
    pub fn weights(&self, tape: &mut Tape, group: &str) -> Result<Var> {
        let g = self.group(group)?;
        let l = self.member_logits(tape, g)?;
        normalize(tape, l, g.norm)
    }

    /// Weighted sum of the group's scratch-pad entries.
    pub fn gated_sum(&self, tape: &mut Tape, pad: &ScratchPad, group: &str) -> Result<Var> {
        let g = self.group(group)?;
        let values = g
            .members
            .iter()
            .map(|m| {
                pad.get(m).ok_or_else(|| {
                    PmnError::invalid("gated_sum", format!("`{m}` missing from scratch pad"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let l = self.member_logits(tape, g)?;
        gated_sum(tape, &values, l, g.norm)
    }
}

fn normalize(tape: &mut Tape, logits: Var, norm: GroupNorm) -> Result<Var> {
    Ok(match norm {
        GroupNorm::Softmax => tape.softmax(logits, 0)?,
        GroupNorm::Sigmoid => tape.sigmoid(logits),
    })
}

/// `Σ_k w_k v_k` with `w` the normalized `logits`.
pub fn gated_sum(tape: &mut Tape, values: &[Var], logits: Var, norm: GroupNorm) -> Result<Var> {
    if values.is_empty() {
        return Err(PmnError::EmptyGroup("gated_sum".into()));
    }
    let w = normalize(tape, logits, norm)?;
    tape.weighted_sum(w, values)
}

/// Numeric normalization used for trace documents.
pub fn normalize_values(logits: &[f64], norm: GroupNorm) -> Vec<f64> {
    match norm {
        GroupNorm::Softmax => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        }
        GroupNorm::Sigmoid => logits.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
    }
}
