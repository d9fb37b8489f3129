use super::params::{ParamKind, ParameterSet};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{PmnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − central| / max(1, |central|)
    pub max_rel_error: f64,
    /// Parameter (or `input`) and flat coordinate of the worst disagreement.
    pub worst: (String, usize),
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (String::new(), 0),
            coords_checked: 0,
        }
    }

    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.coords_checked += 1;
        if self.coords_checked == 1 || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = (name.to_string(), coord);
        }
    }
}

fn eval_scalar(tape: &Tape, loss: Var, name: &str, coord: usize) -> Result<f64> {
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(PmnError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    if !v[0].is_finite() {
        return Err(PmnError::NonFinite {
            name: name.to_string(),
            coord,
        });
    }
    Ok(v[0])
}

/// Central-difference check of `f` with respect to its single input.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::default();
    let x = tape.leaf(point);
    let loss = f(&mut tape, x)?;
    eval_scalar(&tape, loss, "input", 0)?;
    let analytic = if tape.requires_grad(loss) {
        tape.backward(loss)?.wrt(x).map(<[f64]>::to_vec)
    } else {
        None
    }
    .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut report = GradCheckReport::new();
    let mut probe = point.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        let mut side = |delta: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + delta;
            let mut t = Tape::default();
            let xv = t.constant(&probe);
            let l = f(&mut t, xv)?;
            eval_scalar(&t, l, "input", i)
        };
        let plus = side(eps)?;
        let minus = side(-eps)?;
        probe.data_mut()[i] = orig;
        report.record("input", i, a, (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// Central-difference check of a scalar loss with respect to the weights of
/// `params` whose names start with `prefix` (empty prefix: all weights).
///
/// `max_per_param` limits the coordinates probed per entry to an evenly
/// spaced subset, which keeps checks on large composed models tractable.
pub fn grad_check_params<F>(
    params: &ParameterSet,
    prefix: &str,
    max_per_param: Option<usize>,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    eval_scalar(&tape, loss, "loss", 0)?;
    let grads = tape.backward(loss)?;

    let ids: Vec<_> = if prefix.is_empty() {
        params.ids().collect()
    } else {
        params.ids_with_prefix(prefix).collect()
    };
    let mut work = params.clone();
    let mut report = GradCheckReport::new();
    for id in ids {
        if params.kind(id) != ParamKind::Weight {
            continue;
        }
        let n = params.value(id).len();
        let coords: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let name = params.name(id).to_string();
        let analytic = grads.param(id);
        for c in coords {
            let orig = work.value(id).data()[c];
            let mut side = |delta: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[c] = orig + delta;
                let mut t = Tape::new(&work);
                let l = f(&mut t)?;
                eval_scalar(&t, l, &name, c)
            };
            let plus = side(eps)?;
            let minus = side(-eps)?;
            work.value_mut(id).data_mut()[c] = orig;
            let a = analytic.map_or(0.0, |g| g[c]);
            report.record(&name, c, a, (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let r = grad_check(
            |t, _x| Ok(t.constant(&Tensor::scalar(4.0))),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.coords_checked, 2);
    }

    #[test]
    fn non_finite_names_coordinate() {
        let err = grad_check(
            |t, x| {
                let l = t.log(x);
                Ok(t.sum(l))
            },
            &Tensor::vector(vec![1.0, 1e-6]),
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, PmnError::NonFinite { coord: 1, .. }), "{err}");
    }
}
