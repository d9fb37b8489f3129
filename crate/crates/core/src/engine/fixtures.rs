use super::*;
use crate::nn::{Linear, ParamBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Four-module layered graph: `m0` terminal, `m1` calls `[m0]`, `m2` calls
/// `[m1, m0]`, `m3` calls `[m2, m1]`, one step each. Every module maps width
/// `w` to width `w` and gates its children with one softmax group.
pub fn layered_graph(width: usize, seed: u64) -> Result<Registry> {
    let mut reg = Registry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut reg.params, &mut rng);
    let lin0 = Linear::new(&mut pb, "m0.map", width, width, true)?;
    let mut comps = Vec::new();
    for (name, children) in [
        ("m1", vec!["m0"]),
        ("m2", vec!["m1", "m0"]),
        ("m3", vec!["m2", "m1"]),
    ] {
        let g = Linear::new(
            &mut pb,
            &format!("{name}.importance"),
            width,
            children.len(),
            true,
        )?;
        let u = Linear::new(&mut pb, &format!("{name}.update"), 2 * width, width, true)?;
        comps.push((name, children, g, u));
    }
    reg.register(ModuleSpec::terminal(
        "m0",
        terminal_fn(move |tape, _, q| {
            let y = lin0.forward(tape, q.main())?;
            Ok(Msg::one(tape.tanh(y)))
        }),
    ))?;
    for (level, (name, children, g, u)) in comps.into_iter().enumerate() {
        let slots = children
            .iter()
            .map(|c| ChildSlot::module(c, pass_state(), pass_output()))
            .collect();
        let mut c = Composition::new(slots, Steps::Fixed(1));
        c.importance = Some(importance_fn(move |tape, s| g.forward(tape, s[0])));
        c.groups = vec![GateGroup::softmax("all", &children)];
        c.update = update_fn(move |tape, _, s, pad, gates, _| {
            let gates = gates.ok_or_else(|| PmnError::Invariant("missing gates".into()))?;
            let k = gates.gated_sum(tape, pad, "all")?;
            let x = tape.concat(&[s[0], k], 0)?;
            let y = u.forward(tape, x)?;
            Ok(vec![tape.tanh(y)])
        });
        reg.register(ModuleSpec::compositional(name, level as u32 + 1, c))?;
    }
    Ok(reg)
}
