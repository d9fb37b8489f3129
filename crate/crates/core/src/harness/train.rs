use super::metrics::Metrics;
use crate::engine::GatingMode;
use crate::error::{PmnError, Result};
use crate::nn::update_norm_stats;
use crate::parallel::{map_slice, Parallelism};
use crate::seeds;
use crate::tasks::{CntOptions, QaOptions, Sample, Suite, TaskKind};
use crate::tensor::{Adam, ParamGrads, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to 1e-4 for counting and 5e-4 otherwise.
    pub lr: Option<f64>,
    pub seed: u64,
    /// Share of the training set used, drawn deterministically from `seed`.
    pub fraction: f64,
    /// Lower modules updated along with the new one. `None` means the
    /// default: the counting module when training QA, nothing otherwise.
    pub trainable_children: Option<Vec<String>>,
    /// Stop after this many optimizer steps (whole epochs otherwise).
    pub max_steps: Option<usize>,
    pub norm_momentum: f64,
    pub cnt: CntOptions,
    pub qa: QaOptions,
    /// Gating of the module being trained; overrides the per-task options.
    pub gating: GatingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Obj,
            epochs: 10,
            batch_size: 32,
            lr: None,
            seed: 0,
            fraction: 1.0,
            trainable_children: None,
            max_steps: None,
            norm_momentum: 0.1,
            cnt: CntOptions::default(),
            qa: QaOptions::default(),
            gating: GatingMode::Learned,
        }
    }
}

impl TrainConfig {
    pub fn for_task(task: TaskKind) -> Self {
        TrainConfig {
            task,
            ..TrainConfig::default()
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(if self.task == TaskKind::Cnt {
            1e-4
        } else {
            5e-4
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| {
            Err(PmnError::Config {
                path: path.to_string(),
                msg: msg.to_string(),
            })
        };
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("train.fraction", "must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("train.lr", "must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("train.norm_momentum", "must be in [0, 1]");
        }
        Ok(())
    }

    fn trainable_children(&self, suite: &Suite) -> Vec<String> {
        match &self.trainable_children {
            Some(c) => c.clone(),
            None if self.task == TaskKind::Qa && self.qa.cnt && suite.has("cnt") => {
                vec!["cnt".into()]
            }
            None => Vec::new(),
        }
    }
}

/// Registers the module of `cfg.task` with the options and gating in `cfg`.
pub fn build_module(suite: &mut Suite, cfg: &TrainConfig) -> Result<()> {
    match cfg.task {
        TaskKind::Cnt => suite.add_cnt(
            cfg.seed,
            &CntOptions {
                gating: cfg.gating,
                ..cfg.cnt.clone()
            },
        ),
        TaskKind::Qa => suite.add_qa(
            cfg.seed,
            &QaOptions {
                gating: cfg.gating,
                ..cfg.qa.clone()
            },
        ),
        TaskKind::Cap => suite.add_cap(cfg.seed, cfg.gating),
        other => suite.add_default(other, cfg.seed),
    }
}

/// Lower modules that must exist before `cfg.task` can be built, children
/// before parents. Lower modules are assumed to use default options.
pub fn prerequisites(cfg: &TrainConfig) -> Vec<TaskKind> {
    use TaskKind::*;
    let direct: Vec<TaskKind> = match cfg.task {
        Obj | Att => Vec::new(),
        Rel | Cap => vec![Obj, Att],
        Cnt => cfg
            .cnt
            .children()
            .iter()
            .filter_map(|c| TaskKind::parse(c).ok())
            .collect(),
        Qa => cfg
            .qa
            .children()
            .iter()
            .filter_map(|c| TaskKind::parse(c).ok())
            .collect(),
    };
    let mut need = direct.clone();
    for d in direct {
        need.extend(prerequisites(&TrainConfig::for_task(d)));
    }
    [Obj, Att, Rel, Cap, Cnt]
        .into_iter()
        .filter(|t| need.contains(t))
        .collect()
}

/// Deterministic subset of `ceil(fraction · n)` samples, in original order.
pub fn subsample(samples: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PmnError::Config {
            path: "fraction".into(),
            msg: "must be in (0, 1]".into(),
        });
    }
    let keep = (fraction * samples.len() as f64).ceil() as usize;
    if keep == 0 {
        return Err(PmnError::Dataset(format!(
            "fraction {fraction} leaves no training samples"
        )));
    }
    if keep >= samples.len() {
        return Ok(samples.to_vec());
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x5ab5)));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
}

/// Returned metrics describe training: the loss curve and the running
/// accuracy of the last epoch (scored before each batch's update).
///
/// Builds the module for `cfg.task` if absent, then trains it on `train`.
///
/// Only the new module's parameters and those of `trainable_children` are
/// updated; every other entry stays byte-identical. Each direct child must
/// have been trained (or loaded) first.
pub fn train_task(
    suite: &mut Suite,
    cfg: &TrainConfig,
    train: &[Sample],
    par: Parallelism,
) -> Result<Metrics> {
    cfg.validate()?;
    let start = Instant::now();
    let task = cfg.task;
    let name = task.name();
    if !suite.has(name) {
        build_module(suite, cfg)?;
    }
    let h = suite.reg.handle(name)?;
    for child in suite.reg.spec(h).module_children() {
        if !suite.reg.is_trained(&child) {
            return Err(PmnError::UntrainedChild(child));
        }
    }
    let children = cfg.trainable_children(suite);
    for c in &children {
        if !suite.has(c) {
            return Err(PmnError::UnknownModule(c.clone()));
        }
    }
    let data = subsample(train, cfg.fraction, cfg.seed)?;
    let params = &mut suite.reg.params;
    params.set_trainable_all(false);
    params.set_trainable_prefix(name, true);
    for c in &children {
        params.set_trainable_prefix(c, true);
    }
    let adam = Adam::with_lr(cfg.learning_rate());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_accuracy = 0.0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(
            cfg.seed,
            1000 + epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        let mut epoch_score = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let items: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
            let s: &Suite = suite;
            let outs = map_slice(&items, par, |sample| -> Result<_> {
                let mut tape = Tape::new(&s.reg.params);
                tape.set_grad_frozen(false);
                tape.set_collect_stats(true);
                let f = s.forward(&mut tape, task, sample, false)?;
                let loss = tape.scalar(f.loss);
                let g = tape.backward(f.loss)?;
                let mut acc = ParamGrads::new(s.reg.params.len());
                g.accumulate_into(&mut acc);
                Ok((loss, f.score, acc, tape.take_stats()))
            });
            let mut grads = ParamGrads::new(suite.reg.params.len());
            let mut stats = Vec::new();
            let mut batch_loss = 0.0;
            for o in outs {
                let (l, score, g, st) = o?;
                batch_loss += l;
                epoch_score += score;
                grads.merge(&g);
                stats.extend(st);
            }
            if !batch_loss.is_finite() {
                return Err(PmnError::NanLoss(step));
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.fill_trainable(&suite.reg.params);
            adam.step(&mut suite.reg.params, &grads)?;
            update_norm_stats(&mut suite.reg.params, &stats, cfg.norm_momentum)?;
            epoch_loss += batch_loss;
            seen += batch.len();
            step += 1;
        }
        if seen > 0 {
            curve.push(epoch_loss / seen as f64);
            last_accuracy = epoch_score / seen as f64;
        }
    }
    suite.reg.params.set_trainable_all(false);
    suite.reg.mark_trained(name);
    Ok(Metrics {
        task: name.to_string(),
        samples: data.len(),
        accuracy: last_accuracy,
        loss_curve: curve,
        wall_clock_s: start.elapsed().as_secs_f64(),
        ..Metrics::default()
    })
}
