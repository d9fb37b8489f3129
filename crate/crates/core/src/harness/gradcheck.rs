use crate::error::{PmnError, Result};
use crate::tasks::{Sample, Suite, TaskKind};
use crate::tensor::{grad_check_params, GradCheckReport, ParamKind, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Copy of `params` with every all-zero weight entry (fresh biases) set to
/// small random values. Zero states meeting zero biases put ReLUs exactly on
/// their kink, where central differences disagree with any subgradient.
fn generic_point(params: &ParameterSet, seed: u64) -> ParameterSet {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = p.ids().collect();
    for id in ids {
        if p.kind(id) != ParamKind::Weight || p.value(id).data().iter().any(|&x| x != 0.0) {
            continue;
        }
        p.value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen_range(-0.1..0.1));
    }
    p
}

/// Central-difference check of a task's summed loss over `samples` with
/// respect to every weight in the suite. Lower modules are included, so the
/// check covers gradients flowing through frozen children too. The check
/// runs on a copy whose zero-initialized biases are jittered (seeded by
/// `seed`); the suite itself is not modified.
pub fn grad_check_task(
    suite: &Suite,
    task: TaskKind,
    samples: &[Sample],
    max_per_param: Option<usize>,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let params = generic_point(&suite.reg.params, seed);
    grad_check_params(&params, "", max_per_param, eps, |tape| {
        let mut total = None;
        for s in samples {
            let l = suite.forward(tape, task, s, false)?.loss;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        total.ok_or_else(|| PmnError::Dataset("grad check needs at least one sample".into()))
    })
}
