use super::{Linear, ParamBuilder};
use crate::error::{PmnError, Result};
use crate::tensor::{Tape, Var};

/// Single GRU step on vectors:
/// `z = σ(W_z[x;h])`, `r = σ(W_r[x;h])`, `h̃ = tanh(W_h[x; r⊙h])`,
/// `h' = (1 − z)⊙h + z⊙h̃`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub z: Linear,
    pub r: Linear,
    pub h: Linear,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(GruCell {
            z: Linear::new(pb, &format!("{name}.z"), input + hidden, hidden, true)?,
            r: Linear::new(pb, &format!("{name}.r"), input + hidden, hidden, true)?,
            h: Linear::new(pb, &format!("{name}.h"), input + hidden, hidden, true)?,
            input,
            hidden,
        })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        if tape.shape(x) != [self.input] || tape.shape(h) != [self.hidden] {
            return Err(PmnError::invalid(
                "gru_step",
                format!(
                    "expected x [{}] and h [{}], got {:?} and {:?}",
                    self.input,
                    self.hidden,
                    tape.shape(x),
                    tape.shape(h)
                ),
            ));
        }
        let xh = tape.concat(&[x, h], 0)?;
        let z = self.z.forward(tape, xh)?;
        let z = tape.sigmoid(z);
        let r = self.r.forward(tape, xh)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh], 0)?;
        let cand = self.h.forward(tape, xrh)?;
        let cand = tape.tanh(cand);
        let diff = tape.sub(cand, h)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h, upd)
    }

    /// Runs the cell over a sequence starting from a zero state.
    pub fn encode(&self, tape: &mut Tape, xs: &[Var]) -> Result<Var> {
        let mut h = tape.zeros(&[self.hidden]);
        for &x in xs {
            h = self.step(tape, x, h)?;
        }
        Ok(h)
    }
}
