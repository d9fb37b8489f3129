use super::params::{ParamGrads, ParamId, ParameterSet};
use super::Tensor;
use crate::error::{PmnError, Result};
use std::borrow::Cow;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    ExpandRows {
        input: Var,
        rows: usize,
    },
    MaxAll {
        input: Var,
        argmax: usize,
    },
    RbfHistogram {
        input: Var,
        centers: Vec<f64>,
        width: f64,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for one forward pass.
///
/// Parameters are borrowed from a [`ParameterSet`] without copying, so a tape
/// cannot outlive the parameters it reads. Tapes are independent; running one
/// per sample is the unit of data parallelism.
pub struct Tape<'p> {
    params: Option<&'p ParameterSet>,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    grad_frozen: bool,
    collect_stats: bool,
    stats: Vec<(ParamId, Vec<f64>)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grad_frozen: true,
            collect_stats: false,
            stats: Vec::new(),
        }
    }
}

/// Lanes of a tensor along `axis`: `(outer, len, inner)` so that element
/// `(o, l, i)` lives at `o * len * inner + l * inner + i`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_lanes(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                y[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                y[at(l)] /= z;
            }
        }
    }
    y
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Tape {
            params: Some(params),
            param_vars: vec![None; params.len()],
            ..Tape::default()
        }
    }

    /// When false, parameters not flagged trainable are loaded as constants:
    /// gradients still flow through the operations that use them, but no
    /// gradient is materialized for the frozen values themselves.
    pub fn set_grad_frozen(&mut self, on: bool) {
        self.grad_frozen = on;
    }

    pub fn set_collect_stats(&mut self, on: bool) {
        self.collect_stats = on;
    }

    pub fn collects_stats(&self) -> bool {
        self.collect_stats
    }

    pub(crate) fn record_stat(&mut self, buffer: ParamId, values: Vec<f64>) {
        if self.collect_stats {
            self.stats.push((buffer, values));
        }
    }

    pub fn take_stats(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.stats)
    }

    pub fn params(&self) -> Option<&'p ParameterSet> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(data, vec![n], Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        self.push(vec![0.0; n], shape.to_vec(), Op::Leaf, false)
    }

    /// Loads a parameter; repeated loads within one tape return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return Ok(*v);
        }
        let params = self
            .params
            .ok_or_else(|| PmnError::invalid("param", "tape has no parameter set"))?;
        if id.0 >= params.len() {
            return Err(PmnError::invalid(
                "param",
                format!("id {} out of range", id.0),
            ));
        }
        let t = params.value(id);
        let requires_grad = self.grad_frozen || params.is_trainable(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// `[m,k]·[k,n]`, `[k]·[k,n]` (row vector) or `[m,k]·[k]` (column vector).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            _ => return Err(PmnError::shape("matmul", &sa, &sb)),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (cj, bj) in row.iter_mut().zip(brow) {
                    *cj += x * bj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(c, out_shape, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(PmnError::shape(op, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((out, self.shape(a).to_vec(), self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, s, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, s, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, s, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(v, s, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).iter().map(|x| f(*x)).collect();
        let s = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(v, s, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| PmnError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(PmnError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(PmnError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            out_shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(PmnError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = lanes(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let v = self.value(a);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            out_shape,
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(PmnError::shape("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(v, shape.to_vec(), Op::Reshape(a), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let cols = match self.shape(a) {
            [_, c] => *c,
            s => {
                return Err(PmnError::invalid(
                    "row",
                    format!("expected matrix, got {s:?}"),
                ))
            }
        };
        let r = self.slice(a, 0, i, 1)?;
        self.reshape(r, &[cols])
    }

    /// Stacks equal-length vectors into a `[k, n]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let n = match self.shape(r) {
                [n] => *n,
                s => {
                    return Err(PmnError::invalid(
                        "stack",
                        format!("expected vector, got {s:?}"),
                    ))
                }
            };
            reshaped.push(self.reshape(r, &[1, n])?);
        }
        self.concat(&reshaped, 0)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(PmnError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[o * len * inner + l * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out, out_shape, Op::SumAxis { input: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], Vec::new(), Op::SumAll(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(PmnError::invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let y = softmax_lanes(self.value(a), &shape, axis);
        let rg = self.rg(a);
        Ok(self.push(y, shape, Op::Softmax { input: a, axis }, rg))
    }

    /// `Σ_k weights[k] · inputs[k]` for equally shaped inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        if self.shape(weights) != [inputs.len()] {
            return Err(PmnError::shape(
                "weighted_sum",
                self.shape(weights),
                &[inputs.len()],
            ));
        }
        let first = *inputs
            .first()
            .ok_or_else(|| PmnError::invalid("weighted_sum", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for (k, &x) in inputs.iter().enumerate() {
            if self.shape(x) != shape.as_slice() {
                return Err(PmnError::shape("weighted_sum", &shape, self.shape(x)));
            }
            let w = self.value(weights)[k];
            for (o, xi) in out.iter_mut().zip(self.value(x)) {
                *o += w * xi;
            }
        }
        let rg = self.rg(weights) || inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            shape,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats a vector `rows` times into a `[rows, n]` matrix.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let n = match self.shape(a) {
            [n] => *n,
            s => {
                return Err(PmnError::invalid(
                    "expand_rows",
                    format!("expected vector, got {s:?}"),
                ))
            }
        };
        if rows == 0 {
            return Err(PmnError::invalid("expand_rows", "zero rows"));
        }
        let v = self.value(a).repeat(rows);
        let rg = self.rg(a);
        Ok(self.push(v, vec![rows, n], Op::ExpandRows { input: a, rows }, rg))
    }

    pub fn max(&mut self, a: Var) -> Var {
        let (argmax, m) =
            self.value(a)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
                    if x > bv {
                        (i, x)
                    } else {
                        (bi, bv)
                    }
                });
        let rg = self.rg(a);
        self.push(vec![m], Vec::new(), Op::MaxAll { input: a, argmax }, rg)
    }

    /// Soft histogram: `h_j = Σ_i exp(-(x_i - c_j)² / (2 w²))`.
    pub fn rbf_histogram(&mut self, a: Var, centers: &[f64], width: f64) -> Result<Var> {
        if width <= 0.0 || centers.is_empty() {
            return Err(PmnError::invalid(
                "rbf_histogram",
                "need positive width and at least one center",
            ));
        }
        let x = self.value(a);
        let inv = 1.0 / (2.0 * width * width);
        let out = centers
            .iter()
            .map(|c| x.iter().map(|xi| (-(xi - c).powi(2) * inv).exp()).sum())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            out,
            vec![centers.len()],
            Op::RbfHistogram {
                input: a,
                centers: centers.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// `-Σ t_i log softmax(x)_i` for a target distribution `t`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        if self.shape(logits) != [target.len()] {
            return Err(PmnError::shape(
                "cross_entropy",
                self.shape(logits),
                &[target.len()],
            ));
        }
        let x = self.value(logits);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = target
            .iter()
            .zip(x)
            .map(|(t, v)| t * (lse - v))
            .sum::<f64>();
        let probs = softmax_lanes(x, &[x.len()], 0);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            Vec::new(),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn cross_entropy_index(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if target >= n {
            return Err(PmnError::invalid(
                "cross_entropy",
                format!("target {target} >= {n}"),
            ));
        }
        let mut t = vec![0.0; n];
        t[target] = 1.0;
        self.cross_entropy(logits, &t)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(PmnError::shape(
                "bce_with_logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let x = self.value(logits);
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            Vec::new(),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns fresh gradients; nothing on
    /// the tape or in the parameter set is mutated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(PmnError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Err(PmnError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_nodes = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    param_nodes.push((*id, Var(i)));
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let ga = slot(&mut grads, *a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                ga[i * k + p] +=
                                    brow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let gb = slot(&mut grads, *b, k * n);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (gbj, gj) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *gbj += x * gj;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_into(ga, &g));
                    self.acc(&mut grads, *b, |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |ga| add_into(ga, &g));
                    self.acc(&mut grads, *b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for j in 0..gb.len() {
                            gb[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    self.acc(&mut grads, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y)
                    });
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = lanes(&node.shape, *axis);
                    let total = node.shape[*axis] * inner;
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis] * inner;
                        self.acc(&mut grads, v, |gv| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + len];
                                add_into(&mut gv[o * len..(o + 1) * len], src);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Slice {
                    input,
                    axis,
                    start,
                    len,
                } => {
                    let shape = self.shape(*input);
                    let (outer, full, inner) = lanes(shape, *axis);
                    self.acc(&mut grads, *input, |gi| {
                        for o in 0..outer {
                            let dst = o * full * inner + start * inner;
                            let src = o * len * inner;
                            add_into(&mut gi[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                }
                Op::Reshape(a) => {
                    self.acc(&mut grads, *a, |ga| add_into(ga, &g));
                }
                Op::SumAxis { input, axis } => {
                    let (outer, len, inner) = lanes(self.shape(*input), *axis);
                    self.acc(&mut grads, *input, |gi| {
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    gi[o * len * inner + l * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    self.acc(&mut grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Softmax { input, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = lanes(&node.shape, *axis);
                    self.acc(&mut grads, *input, |gi| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |l: usize| o * len * inner + l * inner + i;
                                let dot: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                                for l in 0..len {
                                    gi[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            if x[j] > 0.0 {
                                ga[j] += g[j];
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * y[j];
                        }
                    });
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] / x[j];
                        }
                    });
                }
                Op::WeightedSum { weights, inputs } => {
                    let w = self.value(*weights);
                    if self.rg(*weights) {
                        let gw: Vec<f64> = inputs
                            .iter()
                            .map(|&x| self.value(x).iter().zip(&g).map(|(a, b)| a * b).sum())
                            .collect();
                        self.acc(&mut grads, *weights, |acc| add_into(acc, &gw));
                    }
                    for (k, &x) in inputs.iter().enumerate() {
                        let wk = w[k];
                        self.acc(&mut grads, x, |gx| {
                            gx.iter_mut().zip(&g).for_each(|(a, b)| *a += wk * b)
                        });
                    }
                }
                Op::ExpandRows { input, rows } => {
                    let n = node.shape[1];
                    self.acc(&mut grads, *input, |gi| {
                        for r in 0..*rows {
                            add_into(gi, &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::MaxAll { input, argmax } => {
                    self.acc(&mut grads, *input, |gi| gi[*argmax] += g[0]);
                }
                Op::RbfHistogram {
                    input,
                    centers,
                    width,
                } => {
                    let x = self.value(*input);
                    let inv = 1.0 / (2.0 * width * width);
                    let w2 = width * width;
                    self.acc(&mut grads, *input, |gi| {
                        for (j, c) in centers.iter().enumerate() {
                            for (i, xi) in x.iter().enumerate() {
                                let d = xi - c;
                                let h = (-(d * d) * inv).exp();
                                gi[i] += g[j] * h * (-d / w2);
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mass: f64 = target.iter().sum();
                    self.acc(&mut grads, *logits, |gl| {
                        for j in 0..gl.len() {
                            gl[j] += g[0] * (mass * probs[j] - target[j]);
                        }
                    });
                }
                Op::BceWithLogits { logits, targets } => {
                    let x = self.value(*logits);
                    let n = x.len() as f64;
                    self.acc(&mut grads, *logits, |gl| {
                        for j in 0..gl.len() {
                            gl[j] += g[0] * (sigmoid(x[j]) - targets[j]) / n;
                        }
                    });
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_nodes,
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        f(slot(grads, v, n));
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of one reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.wrt(*v).map(|g| (*id, g)))
    }

    pub fn accumulate_into(&self, acc: &mut ParamGrads) {
        for (id, g) in self.params() {
            acc.add(id, g);
        }
    }
}
