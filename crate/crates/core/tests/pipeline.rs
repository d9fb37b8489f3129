mod common;

use common::{bits, samples, tiny_suite, ALL};
use pmn::harness::{
    evaluate, load_module, load_modules, prerequisites, run_ablation, run_low_data, save_module,
    tiny_stack, train_task, AblationCell, Stack, StackConfig, TaskBudget, TrainConfig,
};
use pmn::parallel::Parallelism;
use pmn::tasks::{CntOptions, QaOptions, Suite, TaskKind};
use pmn::tensor::Tape;
use pmn::PmnError;
use std::path::PathBuf;

fn steps(task: TaskKind, max: usize) -> TrainConfig {
    TrainConfig {
        task,
        epochs: 1000,
        batch_size: 4,
        lr: Some(1e-2),
        max_steps: Some(max),
        ..TrainConfig::default()
    }
}

/// Fresh suite holding only `task` and whatever it calls.
fn partial_suite(task: TaskKind, seed: u64) -> Suite {
    let cfg = tiny_stack();
    let mut s = Suite::new(&cfg.world, &cfg.model).unwrap();
    for t in prerequisites(&TrainConfig::for_task(task)) {
        s.add_default(t, seed + t as u64).unwrap();
        s.reg.mark_trained(t.name());
    }
    s
}

#[test]
fn qa_training_moves_only_qa_and_the_counting_module() {
    let base = tiny_suite(3);
    let data = samples(&base, TaskKind::Qa, 200, 11);
    let frozen = ["obj", "att", "rel", "cap"];
    let before: Vec<_> = ALL.iter().map(|t| bits(&base, t.name())).collect();

    let mut s = tiny_suite(3);
    train_task(
        &mut s,
        &steps(TaskKind::Qa, 100),
        &data,
        Parallelism::default(),
    )
    .unwrap();
    for (i, t) in ALL.iter().enumerate() {
        let same = bits(&s, t.name()) == before[i];
        assert_eq!(same, frozen.contains(&t.name()), "{}", t.name());
    }

    let mut s = tiny_suite(3);
    let cfg = TrainConfig {
        trainable_children: Some(Vec::new()),
        ..steps(TaskKind::Qa, 100)
    };
    train_task(&mut s, &cfg, &data, Parallelism::default()).unwrap();
    assert_eq!(bits(&s, "cnt"), before[4]);
    assert_ne!(bits(&s, "qa"), before[5]);
}

#[test]
fn overfits_a_small_batch() {
    let mut s = partial_suite(TaskKind::Obj, 0);
    let data = samples(&s, TaskKind::Obj, 32, 4);
    let cfg = TrainConfig {
        task: TaskKind::Obj,
        epochs: 200,
        batch_size: 32,
        lr: Some(1e-2),
        ..TrainConfig::default()
    };
    let m = train_task(&mut s, &cfg, &data, Parallelism::default()).unwrap();
    let c = &m.loss_curve;
    assert_eq!(c.len(), 200);
    assert!(c[199] < 0.05, "final loss {}", c[199]);
    // Full-batch Adam may wobble step to step; averages over 20 epochs must fall.
    let windows: Vec<f64> = c.chunks(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn evaluate_matches_a_manual_recount() {
    let s = tiny_suite(5);
    let data = samples(&s, TaskKind::Qa, 60, 2);
    let m = evaluate(&s, TaskKind::Qa, &data, Parallelism::Sequential).unwrap();
    let mut correct = 0;
    let mut relational = (0, 0);
    for (i, smp) in data.iter().enumerate() {
        let mut tape = Tape::new(&s.reg.params);
        let f = s.forward(&mut tape, TaskKind::Qa, smp, false).unwrap();
        assert_eq!(f.predicted, m.predictions[i]);
        let hit = usize::from(f.predicted == smp.record.answer);
        correct += hit;
        if smp.template.unwrap().kind().is_relational() {
            relational.0 += hit;
            relational.1 += 1;
        }
    }
    assert_eq!(m.accuracy, correct as f64 / 60.0);
    assert_eq!(m.relational.total, relational.1);
    assert_eq!(m.relational.correct, relational.0 as f64);
    assert_eq!(m.per_template.values().map(|t| t.total).sum::<usize>(), 60);
}

#[test]
fn training_is_seed_deterministic_and_thread_independent() {
    let run = |par| {
        let mut s = partial_suite(TaskKind::Rel, 1);
        let data = samples(&s, TaskKind::Rel, 64, 9);
        let m = train_task(&mut s, &steps(TaskKind::Rel, 12), &data, par).unwrap();
        (
            bits(&s, ""),
            m.loss_curve.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        )
    };
    let a = run(Parallelism::Sequential);
    assert_eq!(a, run(Parallelism::Sequential));
    assert_eq!(a, run(Parallelism::Rayon));
}

fn save_all(s: &Suite, dir: &std::path::Path) -> Vec<PathBuf> {
    ALL.iter()
        .map(|t| {
            let p = dir.join(format!("{}.ckpt", t.name()));
            save_module(s, t.name(), 3, &p).unwrap();
            p
        })
        .collect()
}

#[test]
fn checkpoints_reproduce_forward_passes_bit_for_bit() {
    let mut s = tiny_suite(3);
    let data = samples(&s, TaskKind::Qa, 100, 21);
    train_task(
        &mut s,
        &steps(TaskKind::Qa, 5),
        &data,
        Parallelism::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = save_all(&s, dir.path());

    let mut fresh = tiny_suite(77);
    assert_ne!(bits(&fresh, ""), bits(&s, ""));
    let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
    load_modules(&mut fresh, &refs).unwrap();
    assert_eq!(bits(&fresh, ""), bits(&s, ""));
    for smp in &data {
        let mut ta = Tape::new(&s.reg.params);
        let mut tb = Tape::new(&fresh.reg.params);
        let a = s.forward(&mut ta, TaskKind::Qa, smp, true).unwrap();
        let b = fresh.forward(&mut tb, TaskKind::Qa, smp, true).unwrap();
        assert_eq!(ta.scalar(a.loss).to_bits(), tb.scalar(b.loss).to_bits());
        assert_eq!(a.predicted, b.predicted);
        assert_eq!(a.trace.unwrap().to_json(), b.trace.unwrap().to_json());
    }
}

#[test]
fn loading_a_parent_before_its_children_fails() {
    let s = tiny_suite(1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cnt.ckpt");
    save_module(&s, "cnt", 1, &p).unwrap();

    let cfg = tiny_stack();
    let mut fresh = Suite::new(&cfg.world, &cfg.model).unwrap();
    for t in [TaskKind::Obj, TaskKind::Att, TaskKind::Rel, TaskKind::Cnt] {
        fresh.add_default(t, 0).unwrap();
    }
    fresh.reg.mark_trained("obj");
    fresh.reg.mark_trained("att");
    let err = load_module(&mut fresh, &p).unwrap_err();
    assert!(
        matches!(&err, PmnError::Checkpoint(m) if m.contains("`rel`")),
        "{err}"
    );

    // A module built with other children refuses the file outright.
    let mut other = Suite::new(&cfg.world, &cfg.model).unwrap();
    for t in [TaskKind::Obj, TaskKind::Att, TaskKind::Rel] {
        other.add_default(t, 0).unwrap();
        other.reg.mark_trained(t.name());
    }
    other
        .add_cnt(
            0,
            &CntOptions {
                rel: false,
                ..CntOptions::default()
            },
        )
        .unwrap();
    assert!(matches!(
        load_module(&mut other, &p),
        Err(PmnError::Checkpoint(_))
    ));
}

#[test]
fn shared_children_are_loaded_once() {
    let s = tiny_suite(2);
    let dir = tempfile::tempdir().unwrap();
    let mut paths = save_all(&s, dir.path());
    paths.reverse();
    paths.push(dir.path().join("obj.ckpt"));
    let mut fresh = tiny_suite(8);
    let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
    let report = load_modules(&mut fresh, &refs).unwrap();
    assert_eq!(report.loaded, ["att", "obj", "cap", "rel", "cnt", "qa"]);
    assert_eq!(report.references["obj"], fresh.reg.parents_of("obj").len());
    assert!(report.references["obj"] >= 3);
    assert_eq!(report.references["qa"], 0);
}

#[test]
fn gradients_reach_frozen_children() {
    let s = tiny_suite(4);
    let data = samples(&s, TaskKind::Qa, 4, 1);
    let mut tape = Tape::new(&s.reg.params);
    let f = s.forward(&mut tape, TaskKind::Qa, &data[0], false).unwrap();
    let g = tape.backward(f.loss).unwrap();
    let mut reached = std::collections::BTreeSet::new();
    for (id, grad) in g.params() {
        if grad.iter().any(|x| *x != 0.0) {
            reached.insert(s.reg.params.name(id).split('.').next().unwrap().to_string());
        }
    }
    for m in ["qa", "cnt", "rel", "obj", "att", "cap"] {
        assert!(reached.contains(m), "no gradient reaches {m}: {reached:?}");
    }
}

#[test]
fn prerequisites_list_children_before_parents() {
    use TaskKind::*;
    assert_eq!(prerequisites(&TrainConfig::for_task(Obj)), []);
    assert_eq!(prerequisites(&TrainConfig::for_task(Rel)), [Obj, Att]);
    assert_eq!(prerequisites(&TrainConfig::for_task(Cnt)), [Obj, Att, Rel]);
    assert_eq!(
        prerequisites(&TrainConfig::for_task(Qa)),
        [Obj, Att, Rel, Cap, Cnt]
    );
    let base = TrainConfig {
        task: Qa,
        qa: QaOptions::base(),
        ..TrainConfig::default()
    };
    assert_eq!(prerequisites(&base), []);
}

fn micro_stack() -> StackConfig {
    let mut cfg = tiny_stack();
    for b in cfg.budgets.values_mut() {
        *b = TaskBudget {
            train: 40,
            test: 30,
            epochs: 1,
            mix: None,
            lr: Some(1e-2),
        };
    }
    cfg.batch_size = 8;
    cfg
}

fn qa_cell(label: &str, qa: QaOptions) -> AblationCell {
    AblationCell {
        label: label.into(),
        train: TrainConfig {
            task: TaskKind::Qa,
            qa,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn grid_cells_equal_direct_training() {
    let cfg = micro_stack();
    let lower = [TaskKind::Obj, TaskKind::Att, TaskKind::Rel];
    let stack = Stack::build(&cfg, 6, &lower, &[TaskKind::Cnt], Parallelism::default()).unwrap();
    let cell = AblationCell {
        label: "rel".into(),
        train: TrainConfig::for_task(TaskKind::Cnt),
    };
    let table = run_ablation(
        std::slice::from_ref(&stack),
        std::slice::from_ref(&cell),
        Parallelism::default(),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 1);

    let mut suite = stack.fork().unwrap();
    let b = cfg.budget(TaskKind::Cnt);
    let tc = TrainConfig {
        task: TaskKind::Cnt,
        epochs: b.epochs,
        batch_size: cfg.batch_size,
        lr: b.lr,
        seed: pmn::seeds::derive(6, 100 + TaskKind::Cnt as u64),
        ..TrainConfig::default()
    };
    train_task(
        &mut suite,
        &tc,
        stack.train_data(TaskKind::Cnt).unwrap(),
        Parallelism::default(),
    )
    .unwrap();
    let m = evaluate(
        &suite,
        TaskKind::Cnt,
        stack.test_data(TaskKind::Cnt).unwrap(),
        Parallelism::default(),
    )
    .unwrap();
    assert_eq!(table.rows[0].accuracy.to_bits(), m.accuracy.to_bits());
    assert_eq!(table.rows[0].metrics.predictions, m.predictions);
}

#[test]
fn low_data_curve_is_consistent_with_the_grid() {
    let cfg = micro_stack();
    let lower = [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
    ];
    let stack = Stack::build(&cfg, 2, &lower, &[TaskKind::Qa], Parallelism::default()).unwrap();
    let base = qa_cell("base", QaOptions::base());
    let comp = qa_cell("compositional", QaOptions::default());
    let fractions = [0.25, 0.5, 1.0];
    let curve = run_low_data(
        std::slice::from_ref(&stack),
        &fractions,
        &base,
        &comp,
        Parallelism::default(),
    )
    .unwrap();
    let got: Vec<f64> = curve.points.iter().map(|p| p.fraction).collect();
    assert_eq!(got, fractions);
    for p in &curve.points {
        assert_eq!(p.gain, p.compositional - p.base);
        assert_eq!(p.train_samples, (p.fraction * 40.0).ceil() as usize);
    }
    let table = run_ablation(
        std::slice::from_ref(&stack),
        &[base, comp],
        Parallelism::default(),
    )
    .unwrap();
    let full = curve.at(1.0)[0];
    assert_eq!(full.base, table.mean_accuracy("base"));
    assert_eq!(full.compositional, table.mean_accuracy("compositional"));
}
