//! One training batch and one evaluation pass of the composed QA module,
//! run on the calling thread and on the rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pmn::harness::{desk_stack, evaluate, train_task, TrainConfig};
use pmn::parallel::Parallelism;
use pmn::tasks::{generate_dataset, materialize, DatasetSpec, Sample, Suite, TaskKind};

const BATCH: usize = 32;

fn setup() -> (Suite, Vec<Sample>) {
    let cfg = desk_stack();
    let mut suite = Suite::new(&cfg.world, &cfg.model).unwrap();
    for t in [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
        TaskKind::Qa,
    ] {
        suite.add_default(t, 1).unwrap();
        suite.reg.mark_trained(t.name());
    }
    let mut spec = DatasetSpec::for_task(TaskKind::Qa, BATCH, 5);
    spec.sigma = cfg.sigma;
    let recs = generate_dataset(&cfg.world, &spec, Parallelism::Sequential).unwrap();
    let data = materialize(
        &suite.world,
        cfg.model.relations,
        &recs,
        Parallelism::Sequential,
    )
    .unwrap();
    (suite, data)
}

fn modes() -> [(&'static str, Parallelism); 2] {
    [
        ("sequential", Parallelism::Sequential),
        ("rayon", Parallelism::Rayon),
    ]
}

fn bench(c: &mut Criterion) {
    let (suite, data) = setup();
    let mut g = c.benchmark_group("qa_batch");
    g.sample_size(10);
    for (name, par) in modes() {
        g.bench_with_input(BenchmarkId::new("evaluate", name), &par, |b, &par| {
            b.iter(|| evaluate(&suite, TaskKind::Qa, &data, par).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("train_step", name), &par, |b, &par| {
            let cfg = TrainConfig {
                task: TaskKind::Qa,
                batch_size: BATCH,
                max_steps: Some(1),
                ..TrainConfig::default()
            };
            b.iter_batched(
                || {
                    let mut s = Suite::new(&suite.world.cfg, &suite.model).unwrap();
                    for t in [
                        TaskKind::Obj,
                        TaskKind::Att,
                        TaskKind::Rel,
                        TaskKind::Cap,
                        TaskKind::Cnt,
                        TaskKind::Qa,
                    ] {
                        s.add_default(t, 1).unwrap();
                        s.reg.mark_trained(t.name());
                    }
                    s
                },
                |mut s| train_task(&mut s, &cfg, &data, par).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
