use super::metrics::{evaluate, Metrics};
use super::train::{subsample, train_task, TrainConfig};
use crate::error::{PmnError, Result};
use crate::parallel::Parallelism;
use crate::seeds;
use crate::tasks::{
    generate_dataset, materialize, DatasetSpec, ModelConfig, QuestionMix, Sample, Suite, TaskKind,
    WorldConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Data and training budget of one task inside a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskBudget {
    pub train: usize,
    pub test: usize,
    pub epochs: usize,
    /// Overrides the task's default question mix.
    pub mix: Option<QuestionMix>,
    /// Overrides the task's default learning rate.
    pub lr: Option<f64>,
}

impl Default for TaskBudget {
    fn default() -> Self {
        TaskBudget {
            train: 2000,
            test: 500,
            epochs: 10,
            mix: None,
            lr: None,
        }
    }
}

/// Everything shared by the cells of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub sigma: f64,
    pub per_scene: usize,
    pub batch_size: usize,
    pub budgets: BTreeMap<TaskKind, TaskBudget>,
}

impl Default for StackConfig {
    fn default() -> Self {
        let budgets = [
            TaskKind::Obj,
            TaskKind::Att,
            TaskKind::Rel,
            TaskKind::Cap,
            TaskKind::Cnt,
            TaskKind::Qa,
        ]
        .into_iter()
        .map(|t| (t, TaskBudget::default()))
        .collect();
        StackConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            sigma: 0.1,
            per_scene: 3,
            batch_size: 32,
            budgets,
        }
    }
}

impl StackConfig {
    pub fn budget(&self, task: TaskKind) -> TaskBudget {
        self.budgets.get(&task).cloned().unwrap_or_default()
    }
}

/// Lower modules trained once for a seed, plus the train/test data of every
/// task, so that grid cells differ only in what they compose.
pub struct Stack {
    pub seed: u64,
    pub cfg: StackConfig,
    /// Lower modules, in training order.
    pub modules: Vec<TaskKind>,
    pub suite: Suite,
    pub lower_metrics: Vec<Metrics>,
    data: BTreeMap<TaskKind, (Vec<Sample>, Vec<Sample>)>,
}

fn module_seed(seed: u64, task: TaskKind) -> u64 {
    seeds::derive(seed, 100 + task as u64)
}

impl Stack {
    /// Trains `modules` (children before parents) for `seed` and draws data
    /// for them and for every task in `extra_data`.
    pub fn build(
        cfg: &StackConfig,
        seed: u64,
        modules: &[TaskKind],
        extra_data: &[TaskKind],
        par: Parallelism,
    ) -> Result<Self> {
        let mut suite = Suite::new(&cfg.world, &cfg.model)?;
        let mut data = BTreeMap::new();
        for &task in modules.iter().chain(extra_data) {
            if data.contains_key(&task) {
                continue;
            }
            let b = cfg.budget(task);
            let draw = |n: usize, salt: u64| -> Result<Vec<Sample>> {
                let mut spec =
                    DatasetSpec::for_task(task, n, seeds::derive(seed, salt * 16 + task as u64));
                spec.sigma = cfg.sigma;
                spec.per_scene = cfg.per_scene;
                spec.relations = cfg.model.relations;
                if let Some(m) = &b.mix {
                    spec.mix = m.clone();
                }
                let recs = generate_dataset(&cfg.world, &spec, par)?;
                materialize(&suite.world, cfg.model.relations, &recs, par)
            };
            let train = draw(b.train, 1)?;
            let test = draw(b.test, 2)?;
            data.insert(task, (train, test));
        }
        let mut lower_metrics = Vec::new();
        for &task in modules {
            let b = cfg.budget(task);
            let tc = TrainConfig {
                task,
                epochs: b.epochs,
                batch_size: cfg.batch_size,
                lr: b.lr,
                seed: module_seed(seed, task),
                ..TrainConfig::default()
            };
            train_task(&mut suite, &tc, &data[&task].0, par)?;
            lower_metrics.push(evaluate(&suite, task, &data[&task].1, par)?);
        }
        Ok(Stack {
            seed,
            cfg: cfg.clone(),
            modules: modules.to_vec(),
            suite,
            lower_metrics,
            data,
        })
    }

    pub fn train_data(&self, task: TaskKind) -> Result<&[Sample]> {
        self.data
            .get(&task)
            .map(|d| d.0.as_slice())
            .ok_or_else(|| PmnError::Dataset(format!("stack has no data for {}", task.name())))
    }

    pub fn test_data(&self, task: TaskKind) -> Result<&[Sample]> {
        self.data
            .get(&task)
            .map(|d| d.1.as_slice())
            .ok_or_else(|| PmnError::Dataset(format!("stack has no data for {}", task.name())))
    }

    /// A new suite holding copies of the trained lower modules.
    pub fn fork(&self) -> Result<Suite> {
        let mut s = Suite::new(&self.cfg.world, &self.cfg.model)?;
        for &task in &self.modules {
            match task {
                TaskKind::Cnt => s.add_cnt(module_seed(self.seed, task), &Default::default())?,
                TaskKind::Qa => s.add_qa(module_seed(self.seed, task), &Default::default())?,
                other => s.add_default(other, module_seed(self.seed, other))?,
            }
            s.reg
                .params
                .copy_values_from(&self.suite.reg.params, task.name())?;
            s.reg.mark_trained(task.name());
        }
        Ok(s)
    }

    /// Trains the cell's module on a fork of the stack and scores it on the
    /// task's test set.
    pub fn run_cell(
        &self,
        cell: &AblationCell,
        fraction: f64,
        par: Parallelism,
    ) -> Result<Metrics> {
        let mut suite = self.fork()?;
        let task = cell.train.task;
        let b = self.cfg.budget(task);
        let mut tc = cell.train.clone();
        tc.seed = module_seed(self.seed, task);
        tc.epochs = b.epochs;
        if tc.lr.is_none() {
            tc.lr = b.lr;
        }
        tc.batch_size = self.cfg.batch_size;
        tc.fraction = fraction;
        let train = self.train_data(task)?;
        let fit = train_task(&mut suite, &tc, train, par)?;
        let mut m = evaluate(&suite, task, self.test_data(task)?, par)?;
        m.loss_curve = fit.loss_curve;
        m.wall_clock_s += fit.wall_clock_s;
        Ok(m)
    }
}

/// One column of an ablation grid. The cell's seed, epochs and batch size
/// come from the stack it runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub label: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub accuracy: f64,
    pub relational_accuracy: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    pub fn rows_for(&self, label: &str) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.label == label).collect()
    }

    pub fn mean_accuracy(&self, label: &str) -> f64 {
        mean(self.rows_for(label).iter().map(|r| r.accuracy))
    }

    pub fn mean_relational(&self, label: &str) -> f64 {
        mean(self.rows_for(label).iter().map(|r| r.relational_accuracy))
    }

    /// Plain-text table: one line per label with mean accuracies over seeds.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<28} {:>6} {:>9} {:>11}\n",
            "model", "seeds", "accuracy", "relational"
        );
        for l in self.labels() {
            s += &format!(
                "{:<28} {:>6} {:>9.4} {:>11.4}\n",
                l,
                self.rows_for(&l).len(),
                self.mean_accuracy(&l),
                self.mean_relational(&l)
            );
        }
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs every cell on every stack. Cells of one stack share its data, lower
/// modules and seed.
pub fn run_ablation(
    stacks: &[Stack],
    cells: &[AblationCell],
    par: Parallelism,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for stack in stacks {
        for cell in cells {
            let m = stack.run_cell(cell, 1.0, par)?;
            table.rows.push(AblationRow {
                label: cell.label.clone(),
                seed: stack.seed,
                accuracy: m.accuracy,
                relational_accuracy: m.relational.accuracy,
                metrics: m,
            });
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowDataPoint {
    pub fraction: f64,
    pub seed: u64,
    pub train_samples: usize,
    pub base: f64,
    pub compositional: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LowDataCurve {
    pub points: Vec<LowDataPoint>,
}

impl LowDataCurve {
    pub fn at(&self, fraction: f64) -> Vec<&LowDataPoint> {
        self.points
            .iter()
            .filter(|p| p.fraction == fraction)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut fr: Vec<f64> = Vec::new();
        for p in &self.points {
            if !fr.contains(&p.fraction) {
                fr.push(p.fraction);
            }
        }
        let mut s = format!(
            "{:>9} {:>6} {:>8} {:>14} {:>8}\n",
            "fraction", "seeds", "base", "compositional", "gain"
        );
        for f in fr {
            let ps = self.at(f);
            s += &format!(
                "{:>9.3} {:>6} {:>8.4} {:>14.4} {:>8.4}\n",
                f,
                ps.len(),
                mean(ps.iter().map(|p| p.base)),
                mean(ps.iter().map(|p| p.compositional)),
                mean(ps.iter().map(|p| p.gain))
            );
        }
        s
    }
}

/// Base and compositional accuracy at each training fraction, in the order
/// given.
pub fn run_low_data(
    stacks: &[Stack],
    fractions: &[f64],
    base: &AblationCell,
    compositional: &AblationCell,
    par: Parallelism,
) -> Result<LowDataCurve> {
    if base.train.task != compositional.train.task {
        return Err(PmnError::invalid(
            "run_low_data",
            "both cells must train the same task",
        ));
    }
    let mut curve = LowDataCurve::default();
    for &f in fractions {
        for stack in stacks {
            let n = subsample(stack.train_data(base.train.task)?, f, 0)?.len();
            let b = stack.run_cell(base, f, par)?;
            let c = stack.run_cell(compositional, f, par)?;
            curve.points.push(LowDataPoint {
                fraction: f,
                seed: stack.seed,
                train_samples: n,
                base: b.accuracy,
                compositional: c.accuracy,
                gain: c.accuracy - b.accuracy,
            });
        }
    }
    Ok(curve)
}
