#![allow(dead_code)]

use pmn::harness::tiny_stack;
use pmn::parallel::Parallelism;
use pmn::tasks::{generate_dataset, materialize, DatasetSpec, Sample, Suite, TaskKind};

pub const ALL: [TaskKind; 6] = [
    TaskKind::Obj,
    TaskKind::Att,
    TaskKind::Rel,
    TaskKind::Cap,
    TaskKind::Cnt,
    TaskKind::Qa,
];

/// Every module at tiny widths, lower ones marked trained so parents may train.
pub fn tiny_suite(seed: u64) -> Suite {
    let cfg = tiny_stack();
    let mut s = Suite::new(&cfg.world, &cfg.model).unwrap();
    for t in ALL {
        s.add_default(t, seed + t as u64).unwrap();
        s.reg.mark_trained(t.name());
    }
    s
}

pub fn samples(suite: &Suite, task: TaskKind, n: usize, seed: u64) -> Vec<Sample> {
    let mut spec = DatasetSpec::for_task(task, n, seed);
    spec.relations = suite.model.relations;
    let recs = generate_dataset(&suite.world.cfg, &spec, Parallelism::Sequential).unwrap();
    materialize(
        &suite.world,
        suite.model.relations,
        &recs,
        Parallelism::Sequential,
    )
    .unwrap()
}

/// Raw bits of every parameter under `prefix` (all of them for "").
pub fn bits(suite: &Suite, prefix: &str) -> Vec<u64> {
    let p = &suite.reg.params;
    let ids: Vec<_> = if prefix.is_empty() {
        p.ids().collect()
    } else {
        p.ids_with_prefix(prefix).collect()
    };
    ids.into_iter()
        .flat_map(|id| {
            p.value(id)
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}
