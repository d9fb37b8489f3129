use pmn::harness::{grad_check_task, tiny_stack};
use pmn::nn::check_blocks;
use pmn::parallel::Parallelism;
use pmn::tasks::{generate_dataset, materialize, DatasetSpec, Suite, TaskKind};
use std::time::Instant;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn stack_suite(seed: u64) -> Suite {
    let cfg = tiny_stack();
    let mut s = Suite::new(&cfg.world, &cfg.model).unwrap();
    for t in [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
        TaskKind::Qa,
    ] {
        s.add_default(t, seed).unwrap();
    }
    s
}

fn samples(s: &Suite, task: TaskKind, n: usize, seed: u64) -> Vec<pmn::tasks::Sample> {
    let cfg = tiny_stack();
    let mut spec = DatasetSpec::for_task(task, n, seed);
    spec.relations = cfg.model.relations;
    let recs = generate_dataset(&cfg.world, &spec, Parallelism::Sequential).unwrap();
    materialize(
        &s.world,
        cfg.model.relations,
        &recs,
        Parallelism::Sequential,
    )
    .unwrap()
}

#[test]
fn blocks_match_central_differences_for_several_seeds() {
    for seed in 0..3 {
        for (name, r) in check_blocks(seed, EPS).unwrap() {
            assert!(r.max_rel_error < TOL, "seed {seed} {name}: {r:?}");
        }
    }
}

#[test]
fn composed_qa_matches_central_differences() {
    let start = Instant::now();
    for seed in 0..3 {
        let s = stack_suite(seed);
        let data = samples(&s, TaskKind::Qa, 3, 40 + seed);
        let r = grad_check_task(&s, TaskKind::Qa, &data, Some(4), EPS, seed).unwrap();
        eprintln!("seed {seed}: {r:?}");
        assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
        assert!(r.coords_checked > 100);
    }
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn every_lower_task_matches_central_differences() {
    let s = stack_suite(7);
    for task in [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
    ] {
        let data = samples(&s, task, 2, 9);
        let r = grad_check_task(&s, task, &data, Some(3), EPS, 7).unwrap();
        assert!(r.max_rel_error < TOL, "{task:?}: {r:?}");
    }
}
