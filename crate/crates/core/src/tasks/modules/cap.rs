use super::{need, CaptionVocab, Suite};
use crate::engine::{
    importance_fn, init_fn, pass_output, predict_fn, receive_fn, terminal_fn, transmit_fn,
    update_fn, ChildSlot, Composition, GateGroup, GatingMode, ModuleSpec, Msg, Steps,
};
use crate::error::{PmnError, Result};
use crate::nn::{
    Activation, AttentionMode, Embedding, GruCell, Linear, Mlp, ParamBuilder, Projection,
    SoftAttention,
};

impl Suite {
    /// Captioning module. Two stacked GRUs emit one token per step; at every
    /// step an attention map picks an entity, whose object, attribute and
    /// position readings are gated into the second GRU. Output parts are
    /// `[probs [T, V], logits [T, V]]` with `len` the number of tokens before
    /// the first predicted end token.
    pub fn add_cap(&mut self, seed: u64, gating: GatingMode) -> Result<()> {
        let hc = self.model.cap_hidden;
        let d = self.world.cfg.feature_dim;
        let e = self.model.terminal_dim;
        let w = self.model.word_dim;
        let a = self.model.attention_dim;
        let vocab = self.cvocab.len();
        let mut rng = Self::rng(seed, "cap");
        let mut pb = ParamBuilder::new(&mut self.reg.params, &mut rng);
        let importance = Linear::new(&mut pb, "cap.importance", hc, 4, true)?;
        let omega = SoftAttention::new(&mut pb, "cap.omega", hc, d, a, AttentionMode::Softmax)?;
        let delta = Mlp::new(&mut pb, "cap.delta", &[d, hc], &[Activation::Tanh])?;
        let recv_obj = Projection::new(&mut pb, "cap.recv_obj", e, hc)?;
        let recv_att = Projection::new(&mut pb, "cap.recv_att", e, hc)?;
        let recv_delta = Projection::new(&mut pb, "cap.recv_delta", hc, hc)?;
        let gru1 = GruCell::new(&mut pb, "cap.gru1", d + w + hc, hc)?;
        let gru2 = GruCell::new(&mut pb, "cap.gru2", 2 * hc, hc)?;
        let out = Linear::new(&mut pb, "cap.out", hc, vocab, true)?;
        let words = Embedding::new(&mut pb, "cap.words", vocab, w)?;

        let attended = || {
            transmit_fn(|tape, env, v| {
                let p = need(v.pad, "omega")?;
                Ok(Msg::one(tape.matmul(p, env.x)?))
            })
        };
        let slots = vec![
            ChildSlot::owned(
                "omega",
                terminal_fn(move |tape, env, q| {
                    Ok(Msg::one(omega.attend(tape, q.main(), env.x)?))
                }),
                transmit_fn(|_, _, v| Ok(Msg::one(v.state[0]))),
                pass_output(),
            ),
            ChildSlot::module(
                "obj",
                attended(),
                receive_fn(move |tape, _, _, o, _| recv_obj.forward(tape, o.main())),
            ),
            ChildSlot::module(
                "att",
                attended(),
                receive_fn(move |tape, _, _, o, _| recv_att.forward(tape, o.main())),
            ),
            ChildSlot::owned(
                "delta",
                terminal_fn(move |tape, _, q| Ok(Msg::one(delta.forward(tape, q.main())?))),
                attended(),
                receive_fn(move |tape, _, _, o, _| recv_delta.forward(tape, o.main())),
            ),
        ];
        let mut c = Composition::new(slots, Steps::Fixed(self.model.cap_steps));
        c.init = init_fn(move |tape, _, _| Ok(vec![tape.zeros(&[hc]), tape.zeros(&[hc])]));
        c.importance = Some(importance_fn(move |tape, s| importance.forward(tape, s[0])));
        c.groups = vec![GateGroup::softmax("rho", &["obj", "att", "delta"])];
        c.gating = gating;
        let out_u = out.clone();
        c.update = update_fn(move |tape, env, s, pad, gates, t| {
            let g = gates.ok_or_else(|| PmnError::invalid("cap", "update needs gates"))?;
            let (h1, h2) = (s[0], s[1]);
            let total = tape.sum_axis(env.x, 0)?;
            let mean = tape.scale(total, 1.0 / env.n as f64);
            let prev = if t == 0 {
                words.lookup(tape, CaptionVocab::BOS)?
            } else {
                let l = out_u.forward(tape, h2)?;
                let p = tape.softmax(l, 0)?;
                words.soft_lookup(tape, p)?
            };
            let in1 = tape.concat(&[mean, prev, h2], 0)?;
            let h1 = gru1.step(tape, in1, h1)?;
            let rho = g.gated_sum(tape, pad, "rho")?;
            let in2 = tape.concat(&[h1, rho], 0)?;
            let h2 = gru2.step(tape, in2, h2)?;
            Ok(vec![h1, h2])
        });
        c.predict = predict_fn(move |tape, _, states, _| {
            let rows = states[1..]
                .iter()
                .map(|s| out.forward(tape, s[1]))
                .collect::<Result<Vec<_>>>()?;
            let logits = tape.stack(&rows)?;
            let probs = tape.softmax(logits, 1)?;
            let len = rows
                .iter()
                .position(|&r| super::argmax(tape.value(r)) == CaptionVocab::EOS)
                .unwrap_or(rows.len())
                .max(1);
            Ok(Msg {
                parts: vec![probs, logits],
                len: Some(len),
            })
        });
        self.reg.register(ModuleSpec::compositional("cap", 1, c))?;
        Ok(())
    }
}
