use super::{need, CountShared, Encoder, RelQuery, Suite};
use crate::engine::{
    importance_fn, init_fn, pass_output, pass_state, predict_fn, receive_fn, terminal_fn,
    transmit_fn, update_fn, ChildSlot, Composition, GateGroup, GatingMode, ModuleSpec, Msg, Steps,
};
use crate::error::{PmnError, Result};
use crate::nn::{Activation, AttentionMode, Linear, Mlp, ParamBuilder, SoftAttention};
use crate::tasks::MAX_COUNT;
use serde::{Deserialize, Serialize};

/// Which lower modules the counting module may call. The attention map over
/// entities (`omega`) is always present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CntOptions {
    pub obj: bool,
    pub att: bool,
    pub rel: bool,
    pub gating: GatingMode,
}

impl Default for CntOptions {
    fn default() -> Self {
        CntOptions {
            obj: true,
            att: true,
            rel: true,
            gating: GatingMode::Learned,
        }
    }
}

impl CntOptions {
    pub fn children(&self) -> Vec<&'static str> {
        let mut c = vec!["omega"];
        for (on, name) in [(self.obj, "obj"), (self.att, "att"), (self.rel, "rel")] {
            if on {
                c.push(name);
            }
        }
        c
    }
}

impl Suite {
    /// Counting module. One step: every child yields a per-entity
    /// membership probability map, the gated sum of the maps is a convex
    /// mixture of them, and soft count features of the mixture feed a
    /// classifier over `0..=12`.
    pub fn add_cnt(&mut self, seed: u64, opts: &CntOptions) -> Result<()> {
        let h = self.model.hidden;
        let d = self.world.cfg.feature_dim;
        let e = self.model.terminal_dim;
        let a = self.model.attention_dim;
        let bins = self.model.count_bins;
        let children = opts.children();
        let mut rng = Self::rng(seed, "cnt");
        let mut pb = ParamBuilder::new(&mut self.reg.params, &mut rng);
        let encoder = Encoder::new(
            &mut pb,
            "cnt.encoder",
            self.qvocab.len(),
            self.model.word_dim,
            h,
        )?;
        let importance = Linear::new(&mut pb, "cnt.importance", h, children.len(), true)?;
        let omega = SoftAttention::new(&mut pb, "cnt.omega", h, d, a, AttentionMode::Sigmoid)?;
        let rel_query = if opts.rel {
            Some(RelQuery::new(
                &mut pb,
                "cnt.relq",
                h,
                d,
                a,
                self.model.relations,
            )?)
        } else {
            None
        };
        let psi = Mlp::new(
            &mut pb,
            "cnt.predict",
            &[bins + 2, h, MAX_COUNT + 1],
            &[Activation::Relu, Activation::None],
        )?;
        let mut slots = Vec::new();
        for &c in &children {
            let slot = match c {
                "omega" => {
                    let om = omega.clone();
                    ChildSlot::owned(
                        "omega",
                        terminal_fn(move |tape, env, q| {
                            Ok(Msg::one(om.attend(tape, q.main(), env.x)?))
                        }),
                        pass_state(),
                        pass_output(),
                    )
                }
                "obj" | "att" => {
                    let recv = SoftAttention::new(
                        &mut pb,
                        &format!("cnt.recv_{c}"),
                        h,
                        e,
                        a,
                        AttentionMode::Sigmoid,
                    )?;
                    ChildSlot::module(
                        c,
                        transmit_fn(|_, env, _| Ok(Msg::one(env.x))),
                        receive_fn(move |tape, _, s, o, _| recv.attend(tape, s[0], o.main())),
                    )
                }
                "rel" => {
                    let rq = rel_query.clone().expect("built when rel is a child");
                    ChildSlot::module(
                        "rel",
                        transmit_fn(move |tape, env, v| rq.query(tape, env, v.state[0])),
                        receive_fn(|tape, _, _, o, _| Ok(tape.sigmoid(o.main()))),
                    )
                }
                other => return Err(PmnError::invalid("cnt", format!("unknown child `{other}`"))),
            };
            slots.push(slot);
        }
        let mut c = Composition::new(slots, Steps::Fixed(1));
        c.init = init_fn(|_, _, q| Ok(vec![q.main()]));
        c.importance = Some(importance_fn(move |tape, s| importance.forward(tape, s[0])));
        c.groups = vec![GateGroup::softmax("maps", &children)];
        c.gating = opts.gating;
        c.update = update_fn(|tape, _, _, pad, gates, _| {
            let g = gates.ok_or_else(|| PmnError::invalid("cnt", "update needs gates"))?;
            let _ = need(pad, "omega")?;
            Ok(vec![g.gated_sum(tape, pad, "maps")?])
        });
        let centers: Vec<f64> = (0..bins).map(|j| j as f64 / (bins - 1) as f64).collect();
        let width = 0.5 / (bins - 1) as f64;
        c.predict = predict_fn(move |tape, _, states, _| {
            let p = states.last().expect("final state")[0];
            let total = tape.sum(p);
            let total = tape.reshape(total, &[1])?;
            let hist = tape.rbf_histogram(p, &centers, width)?;
            let peak = tape.max(p);
            let peak = tape.reshape(peak, &[1])?;
            let feats = tape.concat(&[total, hist, peak], 0)?;
            Ok(Msg::one(psi.forward(tape, feats)?))
        });
        self.reg.register(ModuleSpec::compositional("cnt", 2, c))?;
        self.heads.cnt_encoder = Some(encoder);
        self.heads.cnt_shared = Some(CountShared { omega, rel_query });
        self.heads.cnt_children = children.iter().map(|s| s.to_string()).collect();
        Ok(())
    }
}
