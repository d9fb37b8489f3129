use super::*;

fn small() -> (WorldConfig, ModelConfig) {
    let w = WorldConfig {
        feature_dim: 12,
        ..WorldConfig::default()
    };
    let m = ModelConfig {
        hidden: 8,
        word_dim: 6,
        terminal_dim: 6,
        attention_dim: 8,
        cap_hidden: 8,
        cap_steps: 5,
        ..ModelConfig::default()
    };
    (w, m)
}

fn full_suite() -> Suite {
    let (w, m) = small();
    let mut s = Suite::new(&w, &m).unwrap();
    for t in [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
        TaskKind::Qa,
    ] {
        s.add_default(t, 1).unwrap();
    }
    s
}

#[test]
fn qa_before_its_children_is_rejected() {
    let (w, m) = small();
    let mut s = Suite::new(&w, &m).unwrap();
    s.add_obj(0).unwrap();
    s.add_att(0).unwrap();
    s.add_rel(0).unwrap();
    let err = s.add_qa(0, &QaOptions::default()).unwrap_err();
    assert!(matches!(err, PmnError::DanglingChild { .. }), "{err}");
}

#[test]
fn levels_and_gate_widths() {
    let s = full_suite();
    let levels: Vec<_> = ["obj", "att", "rel", "cap", "cnt", "qa"]
        .iter()
        .map(|n| s.reg.spec(s.reg.handle(n).unwrap()).level)
        .collect();
    assert_eq!(levels, vec![0, 0, 1, 1, 2, 3]);
    let g = s
        .reg
        .params
        .value(s.reg.params.require("qa.importance.w").unwrap());
    assert_eq!(g.shape()[1], 7);
    assert_eq!(QaOptions::default().children().len(), 7);
    assert_eq!(QaOptions::base().children(), vec!["omega", "delta"]);
}

#[test]
fn caption_target_layout() {
    let (w, _) = small();
    let cv = CaptionVocab::new(&w);
    let scene = crate::tasks::generate_scene(4, &w);
    let (toks, live) = cv.target(&scene, 200);
    assert_eq!(live, 5 * scene.len() + 1);
    assert_eq!(toks[live - 1], CaptionVocab::EOS);
    let (cut, live) = cv.target(&scene, 3);
    assert_eq!((cut.len(), live), (3, 3));
}

#[test]
fn every_task_forward_is_finite_and_traced() {
    let s = full_suite();
    let w = s.world.cfg.clone();
    for task in [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cnt,
        TaskKind::Qa,
        TaskKind::Cap,
    ] {
        let spec = crate::tasks::DatasetSpec::for_task(task, 3, 5);
        let recs = crate::tasks::generate_dataset(&w, &spec, Default::default()).unwrap();
        let samples =
            crate::tasks::materialize(&s.world, s.model.relations, &recs, Default::default())
                .unwrap();
        for sample in &samples {
            let mut tape = Tape::new(&s.reg.params);
            let f = s.forward(&mut tape, task, sample, true).unwrap();
            assert!(tape.scalar(f.loss).is_finite(), "{task:?}");
            assert!((0.0..=1.0).contains(&f.score));
            if let Some(trace) = &f.trace {
                let h = s.reg.handle(task.name()).unwrap();
                assert_eq!(
                    trace.call_sequence(),
                    s.reg.reference_calls(h, sample.scene.len()),
                    "{task:?}"
                );
            } else {
                assert!(matches!(task, TaskKind::Obj | TaskKind::Att));
            }
            let g = tape.backward(f.loss).unwrap();
            assert!(g.params().all(|(_, v)| v.iter().all(|x| x.is_finite())));
        }
    }
}

#[test]
fn qa_shares_count_blocks_only_when_asked() {
    let s = full_suite();
    assert!(s.reg.params.id("qa.omega.f.w").is_none());
    assert_eq!(
        s.reg.spec(s.reg.handle("qa").unwrap()).shared,
        vec!["cnt.omega", "cnt.relq"]
    );
    let (w, m) = small();
    let mut t = Suite::new(&w, &m).unwrap();
    for task in [
        TaskKind::Obj,
        TaskKind::Att,
        TaskKind::Rel,
        TaskKind::Cap,
        TaskKind::Cnt,
    ] {
        t.add_default(task, 1).unwrap();
    }
    t.add_qa(
        1,
        &QaOptions {
            share_count_blocks: false,
            ..QaOptions::default()
        },
    )
    .unwrap();
    assert!(t.reg.params.id("qa.omega.f.w").is_some());
}
