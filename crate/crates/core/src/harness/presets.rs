//! Named experiment grids sized to finish on one laptop core.
//!
//! Widths and data budgets are far below the full-scale defaults. The desk
//! world uses noisier entity features (sigma 0.8) so that recognising
//! categories and attributes takes a trained module rather than a lookup.

use super::experiments::{AblationCell, StackConfig, TaskBudget};
use super::train::TrainConfig;
use crate::engine::GatingMode;
use crate::error::{PmnError, Result};
use crate::tasks::{CntOptions, ModelConfig, QaOptions, TaskKind};

pub const PRESETS: &[&str] = &["counting-table2", "qa-gating", "qa-lowdata"];

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: String,
    pub stack: StackConfig,
    pub seeds: Vec<u64>,
    /// Modules trained once per seed before any cell runs.
    pub lower: Vec<TaskKind>,
    pub task: TaskKind,
    pub cells: Vec<AblationCell>,
    /// Training fractions of low-data curves; empty for plain ablations.
    pub fractions: Vec<f64>,
}

fn budget(train: usize, test: usize) -> TaskBudget {
    TaskBudget {
        train,
        test,
        epochs: 10,
        mix: None,
        lr: Some(1e-3),
    }
}

/// Small widths, noisy features and per-task data budgets that reach high
/// accuracy on the lower tasks within a few minutes.
pub fn desk_stack() -> StackConfig {
    let mut cfg = StackConfig::default();
    cfg.world.feature_dim = 32;
    cfg.sigma = 0.8;
    cfg.model = ModelConfig {
        hidden: 24,
        word_dim: 16,
        terminal_dim: 16,
        attention_dim: 64,
        cap_hidden: 24,
        cap_steps: 6,
        ..ModelConfig::default()
    };
    cfg.budgets = [
        (TaskKind::Obj, budget(5000, 1000)),
        (TaskKind::Att, budget(5000, 1000)),
        (TaskKind::Rel, budget(15000, 1000)),
        (TaskKind::Cap, budget(5000, 1000)),
        (TaskKind::Cnt, budget(12000, 1000)),
        (
            TaskKind::Qa,
            TaskBudget {
                lr: Some(3e-3),
                ..budget(5000, 1000)
            },
        ),
    ]
    .into_iter()
    .collect();
    cfg
}

/// Widths small enough that finite-difference checks of the whole stack run
/// in seconds.
pub fn tiny_stack() -> StackConfig {
    let mut cfg = StackConfig::default();
    cfg.world.feature_dim = 12;
    cfg.model = ModelConfig {
        hidden: 8,
        word_dim: 6,
        terminal_dim: 6,
        attention_dim: 8,
        cap_hidden: 8,
        cap_steps: 5,
        ..ModelConfig::default()
    };
    cfg
}

fn cell(label: &str, train: TrainConfig) -> AblationCell {
    AblationCell {
        label: label.to_string(),
        train,
    }
}

fn cnt_cell(label: &str, obj_att: bool, rel: bool) -> AblationCell {
    cell(
        label,
        TrainConfig {
            task: TaskKind::Cnt,
            cnt: CntOptions {
                obj: obj_att,
                att: obj_att,
                rel,
                ..CntOptions::default()
            },
            ..TrainConfig::default()
        },
    )
}

fn qa_cell(label: &str, qa: QaOptions, gating: GatingMode) -> AblationCell {
    cell(
        label,
        TrainConfig {
            task: TaskKind::Qa,
            qa,
            gating,
            ..TrainConfig::default()
        },
    )
}

pub fn preset(name: &str) -> Result<Preset> {
    let seeds = vec![0, 1, 2, 3, 4];
    let qa_lower = vec![
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
    ];
    let p = match name {
        "counting-table2" => {
            let mut stack = desk_stack();
            stack.budgets.insert(TaskKind::Cnt, budget(15000, 2000));
            Preset {
                name: name.into(),
                stack,
                seeds,
                lower: vec![TaskKind::Obj, TaskKind::Att, TaskKind::Rel],
                task: TaskKind::Cnt,
                cells: vec![
                    cnt_cell("BASE", false, false),
                    cnt_cell("+obj+att", true, false),
                    cnt_cell("+obj+att+rel", true, true),
                ],
                fractions: Vec::new(),
            }
        }
        "qa-gating" => Preset {
            name: name.into(),
            stack: desk_stack(),
            seeds,
            lower: qa_lower,
            task: TaskKind::Qa,
            cells: vec![
                qa_cell("learned", QaOptions::default(), GatingMode::Learned),
                qa_cell("fixed-equal", QaOptions::default(), GatingMode::FixedEqual),
            ],
            fractions: Vec::new(),
        },
        "qa-lowdata" => Preset {
            name: name.into(),
            stack: desk_stack(),
            seeds,
            lower: qa_lower,
            task: TaskKind::Qa,
            cells: vec![
                qa_cell("base", QaOptions::base(), GatingMode::Learned),
                qa_cell("compositional", QaOptions::default(), GatingMode::Learned),
            ],
            fractions: vec![0.05, 0.1, 0.25, 1.0],
        },
        other => {
            return Err(PmnError::Config {
                path: "preset".into(),
                msg: format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")),
            })
        }
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_preset_builds() {
        for n in PRESETS {
            let p = preset(n).unwrap();
            assert_eq!(p.seeds.len(), 5);
            assert!(p.cells.iter().all(|c| c.train.task == p.task));
            p.stack.model.validate().unwrap();
        }
        assert!(preset("table9").is_err());
    }

    #[test]
    fn counting_rows_follow_the_composition_order() {
        let p = preset("counting-table2").unwrap();
        let labels: Vec<_> = p.cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["BASE", "+obj+att", "+obj+att+rel"]);
        assert_eq!(p.cells[0].train.cnt.children(), vec!["omega"]);
    }
}
