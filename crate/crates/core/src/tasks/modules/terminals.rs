use super::Suite;
use crate::engine::{terminal_fn, ModuleSpec, Msg};
use crate::error::Result;
use crate::nn::{Linear, ParamBuilder};

impl Suite {
    /// Object classifier: `tanh(W x + b)` on an entity feature vector (or a
    /// matrix of them), with a linear category head used only for training.
    pub fn add_obj(&mut self, seed: u64) -> Result<()> {
        let head = self.add_feature_terminal("obj", seed, self.world.cfg.categories)?;
        self.heads.obj = Some(head);
        Ok(())
    }

    /// Attribute classifier; same body as the object terminal with one
    /// sigmoid output per attribute in its head.
    pub fn add_att(&mut self, seed: u64) -> Result<()> {
        let head = self.add_feature_terminal("att", seed, self.world.cfg.attributes)?;
        self.heads.att = Some(head);
        Ok(())
    }

    fn add_feature_terminal(&mut self, name: &str, seed: u64, outputs: usize) -> Result<Linear> {
        let d = self.world.cfg.feature_dim;
        let e = self.model.terminal_dim;
        let mut rng = Self::rng(seed, name);
        let mut pb = ParamBuilder::new(&mut self.reg.params, &mut rng);
        let body = Linear::new(&mut pb, &format!("{name}.body"), d, e, true)?;
        let head = Linear::new(&mut pb, &format!("{name}.head"), e, outputs, true)?;
        let f = terminal_fn(move |tape, _, q| {
            let y = body.forward(tape, q.main())?;
            Ok(Msg::one(tape.tanh(y)))
        });
        self.reg.register(ModuleSpec::terminal(name, f))?;
        Ok(head)
    }
}
