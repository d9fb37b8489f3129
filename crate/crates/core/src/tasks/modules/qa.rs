use super::{need, Encoder, RelQuery, Suite};
use crate::engine::Env;
use crate::engine::{
    importance_fn, init_fn, pass_output, predict_fn, receive_fn, terminal_fn, transmit_fn,
    update_fn, ChildSlot, Composition, GateGroup, GatingMode, ModuleSpec, Msg, StepView, Steps,
};
use crate::error::{PmnError, Result};
use crate::nn::{
    Activation, AttentionMode, GatedTanh, GruCell, Linear, Mlp, ParamBuilder, Projection,
    SoftAttention,
};
use crate::tasks::MAX_COUNT;
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

pub const QA_STEPS: usize = 2;

/// Which lower modules the QA module may call. The attention map (`omega`)
/// and the position reader (`delta`) are always present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaOptions {
    pub rel: bool,
    pub obj: bool,
    pub att: bool,
    pub cnt: bool,
    pub cap: bool,
    /// Reuse the counting module's attention and relationship-query blocks
    /// when `cnt` is a child.
    pub share_count_blocks: bool,
    pub gating: GatingMode,
}

impl Default for QaOptions {
    fn default() -> Self {
        QaOptions {
            rel: true,
            obj: true,
            att: true,
            cnt: true,
            cap: true,
            share_count_blocks: true,
            gating: GatingMode::Learned,
        }
    }
}

impl QaOptions {
    /// Only the attention map and the position reader.
    pub fn base() -> Self {
        QaOptions {
            rel: false,
            obj: false,
            att: false,
            cnt: false,
            cap: false,
            ..Self::default()
        }
    }

    pub fn children(&self) -> Vec<&'static str> {
        let mut c = vec!["omega"];
        if self.rel {
            c.push("rel");
        }
        for (on, name) in [
            (self.obj, "obj"),
            (self.att, "att"),
            (true, "delta"),
            (self.cnt, "cnt"),
            (self.cap, "cap"),
        ] {
            if on {
                c.push(name);
            }
        }
        c
    }
}

/// `x̄ = softmax(gated map)·X`
fn attended(tape: &mut Tape, env: &Env, v: &StepView) -> Result<Msg> {
    let g = v
        .gates
        .ok_or_else(|| PmnError::invalid("qa", "transmitter needs gates"))?;
    let m = g.gated_sum(tape, v.pad, "map")?;
    let p = tape.softmax(m, 0)?;
    Ok(Msg::one(tape.matmul(p, env.x)?))
}

impl Suite {
    /// Visual question answering module. The state is a question vector and
    /// a knowledge vector. Each of two steps builds an attention map over the
    /// entities from `omega` (and `rel`), reads the attended entity through
    /// the lower modules, gates those readings into a new knowledge vector
    /// and updates the question vector with it. Answer logits are summed over
    /// steps.
    pub fn add_qa(&mut self, seed: u64, opts: &QaOptions) -> Result<()> {
        let h = self.model.hidden;
        let d = self.world.cfg.feature_dim;
        let e = self.model.terminal_dim;
        let w = self.model.word_dim;
        let a = self.model.attention_dim;
        let answers = self.avocab.len();
        let children = opts.children();
        let share = if opts.cnt && opts.share_count_blocks {
            self.heads.cnt_shared.clone()
        } else {
            None
        };
        let mut rng = Self::rng(seed, "qa");
        let mut pb = ParamBuilder::new(&mut self.reg.params, &mut rng);
        let encoder = Encoder::new(&mut pb, "qa.encoder", self.qvocab.len(), w, h)?;
        let state_gru = GruCell::new(&mut pb, "qa.state", h, h)?;
        let importance = Linear::new(&mut pb, "qa.importance", h, children.len(), true)?;
        let mut shared = Vec::new();
        let omega = match &share {
            Some(s) => {
                shared.push("cnt.omega".to_string());
                s.omega.clone()
            }
            None => SoftAttention::new(&mut pb, "qa.omega", h, d, a, AttentionMode::Softmax)?,
        };
        let gt_q = GatedTanh::new(&mut pb, "qa.gate_q", h, h)?;
        let gt_k = GatedTanh::new(&mut pb, "qa.gate_k", h, h)?;
        let classify = Linear::new(&mut pb, "qa.classify", h, answers, true)?;

        let mut slots = Vec::new();
        for &c in &children {
            let slot = match c {
                "omega" => {
                    let om = omega.clone();
                    ChildSlot::owned(
                        "omega",
                        terminal_fn(move |tape, env, q| {
                            Ok(Msg::one(om.logits(tape, q.main(), env.x)?))
                        }),
                        transmit_fn(|_, _, v| Ok(Msg::one(v.state[0]))),
                        pass_output(),
                    )
                }
                "rel" => {
                    let rq = match share.as_ref().and_then(|s| s.rel_query.clone()) {
                        Some(rq) => {
                            shared.push("cnt.relq".to_string());
                            rq
                        }
                        None => RelQuery::new(&mut pb, "qa.relq", h, d, a, self.model.relations)?,
                    };
                    ChildSlot::module(
                        "rel",
                        transmit_fn(move |tape, env, v| rq.query(tape, env, v.state[0])),
                        pass_output(),
                    )
                }
                "obj" | "att" => {
                    let recv = Projection::new(&mut pb, &format!("qa.recv_{c}"), e, h)?;
                    ChildSlot::module(
                        c,
                        transmit_fn(attended),
                        receive_fn(move |tape, _, _, o, _| recv.forward(tape, o.main())),
                    )
                }
                "delta" => {
                    let body = Mlp::new(&mut pb, "qa.delta", &[d, h], &[Activation::Tanh])?;
                    let recv = Projection::new(&mut pb, "qa.recv_delta", h, h)?;
                    ChildSlot::owned(
                        "delta",
                        terminal_fn(move |tape, _, q| Ok(Msg::one(body.forward(tape, q.main())?))),
                        transmit_fn(attended),
                        receive_fn(move |tape, _, _, o, _| recv.forward(tape, o.main())),
                    )
                }
                "cnt" => {
                    let recv = Projection::new(&mut pb, "qa.recv_cnt", MAX_COUNT + 1, h)?;
                    ChildSlot::module(
                        "cnt",
                        transmit_fn(|_, _, v| Ok(Msg::one(v.state[0]))),
                        receive_fn(move |tape, _, _, o, _| {
                            let p = tape.softmax(o.main(), 0)?;
                            recv.forward(tape, p)
                        }),
                    )
                }
                "cap" => {
                    let words =
                        crate::nn::Embedding::new(&mut pb, "qa.cap_words", self.cvocab.len(), w)?;
                    let att = SoftAttention::new(
                        &mut pb,
                        "qa.cap_attend",
                        h,
                        w,
                        a,
                        AttentionMode::Softmax,
                    )?;
                    let recv = Projection::new(&mut pb, "qa.recv_cap", w, h)?;
                    ChildSlot::module(
                        "cap",
                        transmit_fn(|_, _, v| Ok(Msg::one(v.state[0]))),
                        receive_fn(move |tape, _, s, o, _| {
                            let probs = o.parts[0];
                            let len = o.len.unwrap_or(tape.shape(probs)[0]);
                            let probs = tape.slice(probs, 0, 0, len)?;
                            let ws = words.soft_lookup(tape, probs)?;
                            let p = att.attend(tape, s[0], ws)?;
                            let sentence = tape.matmul(p, ws)?;
                            recv.forward(tape, sentence)
                        }),
                    )
                }
                other => return Err(PmnError::invalid("qa", format!("unknown child `{other}`"))),
            };
            slots.push(slot);
        }
        let map: Vec<&str> = children
            .iter()
            .copied()
            .filter(|c| matches!(*c, "omega" | "rel"))
            .collect();
        let knowledge: Vec<&str> = children
            .iter()
            .copied()
            .filter(|c| !matches!(*c, "omega" | "rel"))
            .collect();

        let mut c = Composition::new(slots, Steps::Fixed(QA_STEPS));
        let init_gru = state_gru.clone();
        c.init = init_fn(move |tape, _, q| {
            let zero = tape.zeros(&[h]);
            let q1 = init_gru.step(tape, q.main(), zero)?;
            Ok(vec![q1, tape.zeros(&[h])])
        });
        c.importance = Some(importance_fn(move |tape, s| importance.forward(tape, s[0])));
        c.groups = vec![
            GateGroup::softmax("map", &map),
            GateGroup::softmax("knowledge", &knowledge),
        ];
        c.gating = opts.gating;
        c.update = update_fn(move |tape, _, s, pad, gates, _| {
            let g = gates.ok_or_else(|| PmnError::invalid("qa", "update needs gates"))?;
            let _ = need(pad, "delta")?;
            let k = g.gated_sum(tape, pad, "knowledge")?;
            let q = state_gru.step(tape, k, s[0])?;
            Ok(vec![q, k])
        });
        c.predict = predict_fn(move |tape, _, states, q| {
            let gq = gt_q.forward(tape, q.main())?;
            let mut total: Option<Var> = None;
            for s in &states[1..] {
                let gk = gt_k.forward(tape, s[1])?;
                let joint = tape.mul(gq, gk)?;
                let l = classify.forward(tape, joint)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            Ok(Msg::one(total.expect("at least one step")))
        });
        let mut spec = ModuleSpec::compositional("qa", 3, c);
        spec.shared = shared;
        self.reg.register(spec)?;
        self.heads.qa_encoder = Some(encoder);
        Ok(())
    }
}
