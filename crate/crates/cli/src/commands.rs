use crate::{Cli, Failure, Verb};
use pmn::config::{parse_config, Config};
use pmn::harness::{
    build_module, evaluate, grad_check_task, load_module, prerequisites, preset, run_ablation,
    run_low_data, save_module, tiny_stack, train_task, Metrics, Preset, Stack, TrainConfig,
};
use pmn::nn::check_blocks;
use pmn::parallel::Parallelism;
use pmn::seeds;
use pmn::tasks::{
    generate_dataset, materialize, verify, write_jsonl, DatasetSpec, Record, Sample, Suite,
    TaskKind,
};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

const GRAD_EPS: f64 = 1e-5;

struct Run<'a> {
    cli: &'a Cli,
    cfg: Config,
    par: Parallelism,
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, &cli.set).map_err(|e| Failure::Usage(e.to_string()))
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    let par = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::default()
    };
    write_manifest(cli, &cfg, argv, par)?;
    let r = Run { cli, cfg, par };
    match &cli.verb {
        Verb::GenData { task } => r.gen_data(*task),
        Verb::Train { task, from } => r.train(*task, from.as_deref()),
        Verb::Eval { task, checkpoint } => r.eval(*task, checkpoint),
        Verb::Trace {
            task,
            checkpoint,
            question_id,
        } => r.trace(*task, checkpoint, *question_id),
        Verb::Ablate {
            preset,
            seeds,
            from_config,
        } => r.ablate(preset, seeds.as_deref(), *from_config),
        Verb::Lowdata {
            preset,
            seeds,
            fractions,
            from_config,
        } => r.lowdata(preset, seeds.as_deref(), fractions.as_deref(), *from_config),
        Verb::GradCheck {
            task,
            samples,
            seeds,
            coords,
            tolerance,
        } => r.grad_check(*task, *samples, *seeds, *coords, *tolerance),
    }
}

/// Everything needed to rerun the command: the exact argument list, the
/// normalized config and its hash, the seed and format versions.
fn write_manifest(
    cli: &Cli,
    cfg: &Config,
    argv: &[String],
    par: Parallelism,
) -> Result<(), Failure> {
    let json = cfg.to_json();
    let hash = Sha256::digest(json.as_bytes());
    let mut m = String::new();
    let _ = writeln!(m, "command: {}", argv.join(" "));
    let _ = writeln!(m, "verb: {}", cli.verb.name());
    let _ = writeln!(m, "config_sha256: {hash:x}");
    let _ = writeln!(m, "seed: {}", cfg.seed);
    let _ = writeln!(m, "pmn_version: {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "checkpoint_format: {}", pmn::tensor::FORMAT_VERSION);
    let _ = writeln!(m, "parallelism: {par:?}");
    let _ = writeln!(m, "config:\n{json}");
    fs::write(cli.out.join("manifest.txt"), m)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn metrics_table(ms: &[&Metrics]) -> String {
    let mut s = format!(
        "{:<6} {:>8} {:>9} {:>11} {:>9}\n",
        "task", "samples", "accuracy", "relational", "seconds"
    );
    for m in ms {
        let _ = writeln!(
            s,
            "{:<6} {:>8} {:>9.4} {:>11.4} {:>9.1}",
            m.task, m.samples, m.accuracy, m.relational.accuracy, m.wall_clock_s
        );
        for (k, v) in &m.per_template {
            let _ = writeln!(s, "  {:<20} {:>6} {:>9.4}", k, v.total, v.accuracy);
        }
    }
    s
}

impl Run<'_> {
    fn out(&self, file: &str) -> std::path::PathBuf {
        self.cli.out.join(file)
    }

    /// Train or test split of `task`, seeded from the config seed.
    fn records(&self, task: TaskKind, test: bool) -> Result<Vec<Record>, Failure> {
        let d = &self.cfg.data;
        let (n, salt) = if test { (d.test, 2) } else { (d.train, 1) };
        let mut spec = DatasetSpec::for_task(
            task,
            n,
            seeds::derive(self.cfg.seed, salt * 16 + task as u64),
        );
        spec.sigma = d.sigma;
        spec.per_scene = d.per_scene;
        spec.relations = self.cfg.model.relations;
        if let Some(m) = &d.mix {
            spec.mix = m.clone();
        }
        Ok(generate_dataset(&self.cfg.world, &spec, self.par)?)
    }

    fn samples(&self, suite: &Suite, task: TaskKind, test: bool) -> Result<Vec<Sample>, Failure> {
        let recs = self.records(task, test)?;
        Ok(materialize(
            &suite.world,
            self.cfg.model.relations,
            &recs,
            self.par,
        )?)
    }

    fn task_config(&self, task: TaskKind) -> TrainConfig {
        TrainConfig {
            task,
            ..self.cfg.train.clone()
        }
    }

    /// Registers the task module and its lower modules and loads all of them
    /// from `dir`.
    fn load_suite(&self, task: TaskKind, dir: &Path, include_task: bool) -> Result<Suite, Failure> {
        let tc = self.task_config(task);
        let mut suite = Suite::new(&self.cfg.world, &self.cfg.model)?;
        let load = |suite: &mut Suite, t: TaskKind| -> Result<(), Failure> {
            let path = dir.join(format!("{}.ckpt", t.name()));
            load_module(suite, &path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Ok(())
        };
        for p in prerequisites(&tc) {
            build_module(&mut suite, &TrainConfig::for_task(p))?;
            load(&mut suite, p)?;
        }
        if include_task {
            build_module(&mut suite, &tc)?;
            load(&mut suite, task)?;
        }
        Ok(suite)
    }

    fn gen_data(&self, task: TaskKind) -> Result<(), Failure> {
        for (test, file) in [(false, "train.jsonl"), (true, "test.jsonl")] {
            let recs = self.records(task, test)?;
            let bad = verify(&self.cfg.world, self.cfg.model.relations, &recs, self.par)?;
            if bad > 0 {
                return Err(Failure::Runtime(format!(
                    "{bad} records disagree with the oracle"
                )));
            }
            write_jsonl(BufWriter::new(fs::File::create(self.out(file))?), &recs)?;
            println!("{file}: {} {} records", recs.len(), task.name());
        }
        Ok(())
    }

    fn train(&self, task: TaskKind, from: Option<&Path>) -> Result<(), Failure> {
        let tc = self.task_config(task);
        let lower = prerequisites(&tc);
        let (mut suite, mut lower_metrics) = match from {
            Some(dir) => (self.load_suite(task, dir, false)?, Vec::new()),
            None => {
                let stack = Stack::build(&self.cfg.stack(), self.cfg.seed, &lower, &[], self.par)?;
                (stack.suite, stack.lower_metrics)
            }
        };
        let train = self.samples(&suite, task, false)?;
        let test = self.samples(&suite, task, true)?;
        let fit = train_task(&mut suite, &tc, &train, self.par)?;
        let mut m = evaluate(&suite, task, &test, self.par)?;
        m.loss_curve = fit.loss_curve;
        m.wall_clock_s += fit.wall_clock_s;
        for t in lower.iter().chain([&task]) {
            save_module(
                &suite,
                t.name(),
                self.cfg.seed,
                &self.out(&format!("{}.ckpt", t.name())),
            )?;
        }
        lower_metrics.push(m);
        let refs: Vec<&Metrics> = lower_metrics.iter().collect();
        let table = metrics_table(&refs);
        print!("{table}");
        fs::write(self.out("metrics.txt"), table)?;
        write_json(&self.out("metrics.json"), &lower_metrics)
    }

    fn eval(&self, task: TaskKind, dir: &Path) -> Result<(), Failure> {
        let suite = self.load_suite(task, dir, true)?;
        let test = self.samples(&suite, task, true)?;
        let m = evaluate(&suite, task, &test, self.par)?;
        let table = metrics_table(&[&m]);
        print!("{table}");
        fs::write(self.out("metrics.txt"), table)?;
        write_json(&self.out("metrics.json"), &m)
    }

    fn trace(&self, task: TaskKind, dir: &Path, id: usize) -> Result<(), Failure> {
        let suite = self.load_suite(task, dir, true)?;
        let test = self.samples(&suite, task, true)?;
        let sample = test.get(id).ok_or_else(|| {
            Failure::Usage(format!(
                "question id {id} out of range (test split has {})",
                test.len()
            ))
        })?;
        let mut tape = pmn::tensor::Tape::new(&suite.reg.params);
        let f = suite.forward(&mut tape, task, sample, true)?;
        let trace = f.trace.ok_or_else(|| {
            Failure::Runtime(format!(
                "`{}` is a terminal module and has no trace",
                task.name()
            ))
        })?;
        let path = self.out(&format!("trace-{}-{id}.json", task.name()));
        fs::write(&path, trace.to_json() + "\n")?;
        let err = trace.max_group_sum_error();
        println!(
            "question {id}: answer {} predicted {} | depth {} | max |sum(weights) - 1| = {err:.1e} | {}",
            sample.record.answer,
            f.predicted,
            trace.depth(),
            path.display()
        );
        if err > 1e-9 {
            return Err(Failure::Runtime("group weights do not sum to 1".into()));
        }
        Ok(())
    }

    fn preset(
        &self,
        name: &str,
        seeds: Option<&[u64]>,
        from_config: bool,
    ) -> Result<Preset, Failure> {
        let mut p = preset(name).map_err(|e| Failure::Usage(e.to_string()))?;
        if from_config {
            p.stack = self.cfg.stack();
            p.seeds = self.cfg.experiment.seeds.clone();
            if !p.fractions.is_empty() {
                p.fractions = self.cfg.experiment.fractions.clone();
            }
        }
        if let Some(s) = seeds {
            if s.is_empty() {
                return Err(Failure::Usage("--seeds needs at least one seed".into()));
            }
            p.seeds = s.to_vec();
        }
        Ok(p)
    }

    fn stacks(&self, p: &Preset) -> Result<Vec<Stack>, Failure> {
        let mut out = Vec::new();
        for &seed in &p.seeds {
            let t = Instant::now();
            let s = Stack::build(&p.stack, seed, &p.lower, &[p.task], self.par)?;
            eprintln!(
                "seed {seed}: lower modules ready in {:.0}s",
                t.elapsed().as_secs_f64()
            );
            out.push(s);
        }
        Ok(out)
    }

    fn ablate(&self, name: &str, seeds: Option<&[u64]>, from_config: bool) -> Result<(), Failure> {
        let p = self.preset(name, seeds, from_config)?;
        let stacks = self.stacks(&p)?;
        let table = run_ablation(&stacks, &p.cells, self.par)?;
        let text = table.render();
        print!("{text}");
        fs::write(self.out("ablation.txt"), text)?;
        write_json(&self.out("ablation.json"), &table)
    }

    fn lowdata(
        &self,
        name: &str,
        seeds: Option<&[u64]>,
        fractions: Option<&[f64]>,
        from_config: bool,
    ) -> Result<(), Failure> {
        let mut p = self.preset(name, seeds, from_config)?;
        if let Some(f) = fractions {
            if f.is_empty() || f.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return Err(Failure::Usage("--fractions must lie in (0, 1]".into()));
            }
            p.fractions = f.to_vec();
        }
        if p.cells.len() != 2 || p.fractions.is_empty() {
            return Err(Failure::Usage(format!(
                "preset `{name}` is not a low-data preset"
            )));
        }
        let stacks = self.stacks(&p)?;
        let curve = run_low_data(&stacks, &p.fractions, &p.cells[0], &p.cells[1], self.par)?;
        let text = curve.render();
        print!("{text}");
        fs::write(self.out("lowdata.txt"), text)?;
        write_json(&self.out("lowdata.json"), &curve)
    }

    fn grad_check(
        &self,
        task: TaskKind,
        samples: usize,
        n_seeds: u64,
        coords: usize,
        tol: f64,
    ) -> Result<(), Failure> {
        if samples == 0 || n_seeds == 0 || coords == 0 {
            return Err(Failure::Usage(
                "--samples, --seeds and --coords must be positive".into(),
            ));
        }
        let start = Instant::now();
        let tiny = tiny_stack();
        let mut lines = String::new();
        let mut worst = 0.0f64;
        for seed in 0..n_seeds {
            for (block, r) in check_blocks(seed, GRAD_EPS)? {
                worst = worst.max(r.max_rel_error);
                let _ = writeln!(
                    lines,
                    "seed {seed} block {block:<18} max rel err {:.3e}",
                    r.max_rel_error
                );
            }
            let tc = TrainConfig::for_task(task);
            let mut suite = Suite::new(&tiny.world, &tiny.model)?;
            for p in prerequisites(&tc) {
                build_module(
                    &mut suite,
                    &TrainConfig {
                        seed,
                        ..TrainConfig::for_task(p)
                    },
                )?;
            }
            build_module(&mut suite, &TrainConfig { seed, ..tc })?;
            let mut spec = DatasetSpec::for_task(task, samples, seeds::derive(seed, 77));
            spec.relations = tiny.model.relations;
            let recs = generate_dataset(&tiny.world, &spec, self.par)?;
            let data = materialize(&suite.world, tiny.model.relations, &recs, self.par)?;
            let r = grad_check_task(&suite, task, &data, Some(coords), GRAD_EPS, seed)?;
            worst = worst.max(r.max_rel_error);
            let _ = writeln!(
                lines,
                "seed {seed} module {:<17} max rel err {:.3e} over {} coords (worst {} [{}])",
                task.name(),
                r.max_rel_error,
                r.coords_checked,
                r.worst.0,
                r.worst.1
            );
        }
        let _ = writeln!(
            lines,
            "max rel err {worst:.3e} (tolerance {tol:.0e}) in {:.1}s",
            start.elapsed().as_secs_f64()
        );
        print!("{lines}");
        fs::write(self.out("gradcheck.txt"), &lines)?;
        if worst < tol {
            Ok(())
        } else {
            Err(Failure::Runtime(format!(
                "max relative error {worst:.3e} exceeds {tol:.0e}"
            )))
        }
    }
}
