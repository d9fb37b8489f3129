use crate::error::Result;
use crate::parallel::{map_slice, Parallelism};
use crate::tasks::{Sample, Suite, TaskKind};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub correct: f64,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracy overall and per question template, plus whatever the run
/// recorded about training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: String,
    pub samples: usize,
    /// Mean score: exact-match accuracy, or token accuracy for captioning.
    pub accuracy: f64,
    pub per_template: BTreeMap<String, TemplateScore>,
    /// Questions whose template involves a relation, pooled.
    pub relational: TemplateScore,
    /// Mean training loss per epoch (empty for pure evaluation).
    pub loss_curve: Vec<f64>,
    pub wall_clock_s: f64,
    /// Predicted answer id per sample, in dataset order.
    pub predictions: Vec<usize>,
}

impl TemplateScore {
    fn push(&mut self, score: f64) {
        self.correct += score;
        self.total += 1;
        self.accuracy = self.correct / self.total as f64;
    }
}

/// Scores `task` on `samples`: argmax prediction against the stored answer,
/// ties broken toward the lowest answer id.
pub fn evaluate(
    suite: &Suite,
    task: TaskKind,
    samples: &[Sample],
    par: Parallelism,
) -> Result<Metrics> {
    let start = Instant::now();
    let outcomes = map_slice(samples, par, |s| -> Result<(usize, f64)> {
        let mut tape = Tape::new(&suite.reg.params);
        tape.set_grad_frozen(false);
        let f = suite.forward(&mut tape, task, s, false)?;
        Ok((f.predicted, f.score))
    });
    let mut m = Metrics {
        task: task.name().to_string(),
        samples: samples.len(),
        ..Metrics::default()
    };
    let mut total = 0.0;
    for (s, o) in samples.iter().zip(outcomes) {
        let (pred, score) = o?;
        total += score;
        m.predictions.push(pred);
        if let Some(t) = s.template {
            m.per_template
                .entry(t.kind().name().to_string())
                .or_default()
                .push(score);
            if t.kind().is_relational() {
                m.relational.push(score);
            }
        }
    }
    m.accuracy = if samples.is_empty() {
        0.0
    } else {
        total / samples.len() as f64
    };
    m.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(m)
}
