use super::{need, Suite};
use crate::engine::{
    init_fn, pass_output, predict_fn, terminal_fn, transmit_fn, update_fn, ChildSlot, Composition,
    ModuleSpec, Msg, Steps,
};
use crate::error::{PmnError, Result};
use crate::nn::{Activation, AttentionMode, Linear, Mlp, ParamBuilder, SoftAttention};

impl Suite {
    /// Relationship module. Query: a distribution over reference entities
    /// `[N]` and one over relations `[K]`. Walks the entities one per step,
    /// classifying each and folding its offset into the state; the output is
    /// one logit per entity for "stands in the relation to the reference".
    pub fn add_rel(&mut self, seed: u64) -> Result<()> {
        let h = self.model.hidden;
        let d = self.world.cfg.feature_dim;
        let e = self.model.terminal_dim;
        let k = self.model.relations;
        let mut rng = Self::rng(seed, "rel");
        let mut pb = ParamBuilder::new(&mut self.reg.params, &mut rng);
        let init = Linear::new(&mut pb, "rel.init", k, h, false)?;
        let delta = Linear::new(&mut pb, "rel.delta", 2, h, true)?;
        let update = Mlp::new(
            &mut pb,
            "rel.update",
            &[d + 2 * e + h, h, h],
            &[Activation::Relu, Activation::Tanh],
        )?;
        let score = SoftAttention::new(
            &mut pb,
            "rel.score",
            h,
            h,
            self.model.attention_dim,
            AttentionMode::Sigmoid,
        )?;

        let entity_row = || transmit_fn(|tape, env, v| Ok(Msg::one(tape.row(env.x, v.t)?)));
        let slots = vec![
            ChildSlot::module("obj", entity_row(), pass_output()),
            ChildSlot::module("att", entity_row(), pass_output()),
            ChildSlot::owned(
                "delta",
                terminal_fn(move |tape, _, q| {
                    let y = delta.forward(tape, q.main())?;
                    Ok(Msg::one(tape.tanh(y)))
                }),
                transmit_fn(|tape, env, v| Ok(Msg::one(tape.row(env.boxes, v.t)?))),
                pass_output(),
            ),
        ];
        let mut c = Composition::new(slots, Steps::PerEntity);
        c.init = init_fn(move |tape, env, q| {
            if q.parts.len() != 2
                || tape.shape(q.parts[0]) != [env.n]
                || tape.shape(q.parts[1]) != [k]
            {
                return Err(PmnError::invalid(
                    "rel",
                    "query must be [reference [N], relation [K]]",
                ));
            }
            Ok(vec![init.forward(tape, q.parts[1])?])
        });
        c.update = update_fn(move |tape, env, _, pad, _, t| {
            let xt = tape.row(env.x, t)?;
            let parts = [
                xt,
                need(pad, "obj")?,
                need(pad, "att")?,
                need(pad, "delta")?,
            ];
            let joined = tape.concat(&parts, 0)?;
            Ok(vec![update.forward(tape, joined)?])
        });
        c.predict = predict_fn(move |tape, _, states, q| {
            let s1 = states[0][0];
            let rows: Vec<_> = states[1..].iter().map(|s| s[0]).collect();
            let walked = tape.stack(&rows)?;
            let reference = tape.matmul(q.parts[0], walked)?;
            let key = tape.mul(s1, reference)?;
            Ok(Msg::one(score.logits(tape, key, walked)?))
        });
        self.reg.register(ModuleSpec::compositional("rel", 1, c))?;
        Ok(())
    }
}
