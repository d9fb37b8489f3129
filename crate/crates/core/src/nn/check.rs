//! Finite-difference checks of every block against its analytic gradient.

use super::{
    Activation, AffineNorm, AttentionMode, Embedding, GatedTanh, GruCell, Linear, Mlp,
    ParamBuilder, Projection, SoftAttention,
};
use crate::error::Result;
use crate::tensor::{
    grad_check_params, GradCheckReport, ParamKind, ParameterSet, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reduces a block output to a scalar with fixed random weights, so no
/// coordinate's gradient cancels by symmetry.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(&Tensor::new(
        if shape.is_empty() { vec![1] } else { shape },
        w,
    )?);
    let out = if tape.shape(out).is_empty() {
        tape.reshape(out, &[1])?
    } else {
        out
    };
    let y = tape.mul(out, w)?;
    Ok(tape.sum(y))
}

fn input(
    params: &mut ParameterSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
) -> Result<()> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    params.add(name, Tensor::new(shape.to_vec(), data)?, ParamKind::Weight)?;
    Ok(())
}

fn input_var(tape: &mut Tape, name: &str) -> Result<Var> {
    let id = tape
        .params()
        .expect("checked tapes carry parameters")
        .require(name)?;
    tape.param(id)
}

type Probe = Box<dyn Fn(&mut Tape) -> Result<Var>>;

/// Checks each block with respect to its weights and its inputs.
/// Inputs are stored as extra weights named `in*` so one routine perturbs
/// both.
pub fn check_blocks(seed: u64, eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut run = |name: &str, build: &dyn Fn(&mut ParamBuilder) -> Result<Probe>| -> Result<()> {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = {
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            build(&mut pb)?
        };
        let report = grad_check_params(&params, "", None, eps, |t| {
            let y = f(t)?;
            probe(t, y, seed)
        })?;
        out.push((name.to_string(), report));
        Ok(())
    };

    run("linear", &|pb| {
        input(pb.params, pb.rng, "in", &[3, 4])?;
        let l = Linear::new(pb, "lin", 4, 5, true)?;
        Ok(Box::new(move |t| {
            let x = input_var(t, "in")?;
            l.forward(t, x)
        }))
    })?;
    run("mlp", &|pb| {
        input(pb.params, pb.rng, "in", &[6])?;
        let m = Mlp::new(
            pb,
            "mlp",
            &[6, 7, 5, 3],
            &[Activation::Tanh, Activation::Relu, Activation::Sigmoid],
        )?;
        Ok(Box::new(move |t| {
            let x = input_var(t, "in")?;
            m.forward(t, x)
        }))
    })?;
    run("gated_tanh", &|pb| {
        input(pb.params, pb.rng, "in", &[5])?;
        let g = GatedTanh::new(pb, "gt", 5, 4)?;
        Ok(Box::new(move |t| {
            let x = input_var(t, "in")?;
            g.forward(t, x)
        }))
    })?;
    run("embedding", &|pb| {
        input(pb.params, pb.rng, "in", &[6])?;
        let e = Embedding::new(pb, "emb", 6, 4)?;
        Ok(Box::new(move |t| {
            let x = input_var(t, "in")?;
            let p = t.softmax(x, 0)?;
            let soft = e.soft_lookup(t, p)?;
            let hard = e.lookup(t, 2)?;
            t.add(soft, hard)
        }))
    })?;
    run("gru", &|pb| {
        input(pb.params, pb.rng, "in.x", &[4])?;
        input(pb.params, pb.rng, "in.h", &[5])?;
        let g = GruCell::new(pb, "gru", 4, 5)?;
        Ok(Box::new(move |t| {
            let x = input_var(t, "in.x")?;
            let h = input_var(t, "in.h")?;
            let h1 = g.step(t, x, h)?;
            g.step(t, x, h1)
        }))
    })?;
    for mode in [AttentionMode::Softmax, AttentionMode::Sigmoid] {
        let name = format!(
            "attention.{}",
            if mode == AttentionMode::Softmax {
                "softmax"
            } else {
                "sigmoid"
            }
        );
        run(&name, &move |pb| {
            input(pb.params, pb.rng, "in.key", &[3])?;
            input(pb.params, pb.rng, "in.items", &[5, 4])?;
            let a = SoftAttention::new(pb, "att", 3, 4, 6, mode)?;
            Ok(Box::new(move |t| {
                let k = input_var(t, "in.key")?;
                let items = input_var(t, "in.items")?;
                a.attend(t, k, items)
            }))
        })?;
    }
    run("affine_norm", &|pb| {
        input(pb.params, pb.rng, "in", &[4])?;
        let n = AffineNorm::new(pb, "norm", 4)?;
        pb.params
            .value_mut(n.gamma)
            .data_mut()
            .copy_from_slice(&[0.5, 1.5, -1.0, 2.0]);
        pb.params
            .value_mut(n.mean)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        pb.params
            .value_mut(n.var)
            .data_mut()
            .copy_from_slice(&[0.5, 2.0, 1.0, 0.25]);
        Ok(Box::new(move |t| {
            let x = input_var(t, "in")?;
            n.forward(t, x)
        }))
    })?;
    run("projection", &|pb| {
        input(pb.params, pb.rng, "in", &[5])?;
        let p = Projection::new(pb, "proj", 5, 3)?;
        Ok(Box::new(move |t| {
            let x = input_var(t, "in")?;
            p.forward(t, x)
        }))
    })?;
    Ok(out)
}
