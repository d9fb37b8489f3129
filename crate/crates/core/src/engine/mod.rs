//! Module registry and the recursive executor.
//!
//! A compositional module runs `T` steps. Each step wipes the scratch pad,
//! scores its children, then calls every child in list order: the transmitter
//! builds the child's query from the current state and the pad filled so far,
//! the child runs (recursively), and the receiver turns the child's output into
//! a pad entry. The update function folds the pad into the next state; after
//! the last step the predictor reads every state.

mod fixtures;
mod gates;
mod trace;

pub use fixtures::layered_graph;

pub use gates::{gated_sum, normalize_values, GateGroup, Gates, GatingMode, GroupNorm};
pub use trace::{round_group, round_sig9, Trace, TraceCall, TraceGroup, TraceStep};

use crate::error::{PmnError, Result};
use crate::tensor::{ParameterSet, Tape, Var};
use std::collections::{BTreeMap, BTreeSet};

/// Everything every module may read: entity features `x` (`[N, d]`) and
/// positions `boxes` (`[N, 2]`), both constants on the tape.
#[derive(Clone, Debug)]
pub struct Env {
    pub x: Var,
    pub boxes: Var,
    pub n: usize,
    pub d: usize,
}

/// A query or an output. Most messages are a single vector; variable-length
/// outputs carry a padded matrix plus `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Msg {
    pub parts: Vec<Var>,
    pub len: Option<usize>,
}

impl Msg {
    pub fn one(v: Var) -> Self {
        Msg {
            parts: vec![v],
            len: None,
        }
    }

    pub fn many(parts: Vec<Var>) -> Self {
        Msg { parts, len: None }
    }

    pub fn main(&self) -> Var {
        self.parts[0]
    }

    pub fn norm(&self, tape: &Tape) -> f64 {
        self.parts
            .iter()
            .map(|&p| tape.value(p).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

pub type State = Vec<Var>;

/// Received child outputs of the current step, in call order.
#[derive(Clone, Debug, Default)]
pub struct ScratchPad {
    entries: Vec<(String, Var)>,
}

impl ScratchPad {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    fn push(&mut self, name: &str, v: Var) {
        self.entries.push((name.to_string(), v));
    }

    fn clear(&mut self) {
        self.entries.clear();
    }
}

/// What a transmitter sees when producing a query.
pub struct StepView<'a, 'g> {
    /// Zero-based step index.
    pub t: usize,
    pub state: &'a State,
    pub pad: &'a ScratchPad,
    pub gates: Option<&'a Gates<'g>>,
}

pub type TerminalFn = dyn for<'p> Fn(&mut Tape<'p>, &Env, &Msg) -> Result<Msg> + Send + Sync;
pub type InitFn = dyn for<'p> Fn(&mut Tape<'p>, &Env, &Msg) -> Result<State> + Send + Sync;
pub type ImportanceFn = dyn for<'p> Fn(&mut Tape<'p>, &State) -> Result<Var> + Send + Sync;
pub type TransmitFn = dyn for<'p> Fn(&mut Tape<'p>, &Env, &StepView) -> Result<Msg> + Send + Sync;
pub type ReceiveFn =
    dyn for<'p> Fn(&mut Tape<'p>, &Env, &State, &Msg, usize) -> Result<Var> + Send + Sync;
pub type UpdateFn = dyn for<'p> Fn(&mut Tape<'p>, &Env, &State, &ScratchPad, Option<&Gates>, usize) -> Result<State>
    + Send
    + Sync;
pub type PredictFn =
    dyn for<'p> Fn(&mut Tape<'p>, &Env, &[State], &Msg) -> Result<Msg> + Send + Sync;

pub fn terminal_fn<F>(f: F) -> Box<TerminalFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &Env, &Msg) -> Result<Msg> + Send + Sync + 'static,
{
    Box::new(f)
}

pub fn init_fn<F>(f: F) -> Box<InitFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &Env, &Msg) -> Result<State> + Send + Sync + 'static,
{
    Box::new(f)
}

pub fn importance_fn<F>(f: F) -> Box<ImportanceFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &State) -> Result<Var> + Send + Sync + 'static,
{
    Box::new(f)
}

pub fn transmit_fn<F>(f: F) -> Box<TransmitFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &Env, &StepView) -> Result<Msg> + Send + Sync + 'static,
{
    Box::new(f)
}

pub fn receive_fn<F>(f: F) -> Box<ReceiveFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &Env, &State, &Msg, usize) -> Result<Var> + Send + Sync + 'static,
{
    Box::new(f)
}

pub fn update_fn<F>(f: F) -> Box<UpdateFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &Env, &State, &ScratchPad, Option<&Gates>, usize) -> Result<State>
        + Send
        + Sync
        + 'static,
{
    Box::new(f)
}

pub fn predict_fn<F>(f: F) -> Box<PredictFn>
where
    F: for<'p> Fn(&mut Tape<'p>, &Env, &[State], &Msg) -> Result<Msg> + Send + Sync + 'static,
{
    Box::new(f)
}

/// Transmitter that forwards the step's state unchanged.
pub fn pass_state() -> Box<TransmitFn> {
    transmit_fn(|_, _, v| Ok(Msg::many(v.state.clone())))
}

/// Receiver that forwards the child's main output unchanged.
pub fn pass_output() -> Box<ReceiveFn> {
    receive_fn(|_, _, _, o, _| Ok(o.main()))
}

pub enum ChildTarget {
    /// A registered module at a strictly lower level.
    Module(String),
    /// A terminal owned by the parent (residual or attention module).
    Owned(Box<TerminalFn>),
}

pub struct ChildSlot {
    pub name: String,
    pub target: ChildTarget,
    pub transmit: Box<TransmitFn>,
    pub receive: Box<ReceiveFn>,
}

impl ChildSlot {
    pub fn module(name: &str, transmit: Box<TransmitFn>, receive: Box<ReceiveFn>) -> Self {
        ChildSlot {
            name: name.to_string(),
            target: ChildTarget::Module(name.to_string()),
            transmit,
            receive,
        }
    }

    pub fn owned(
        name: &str,
        f: Box<TerminalFn>,
        transmit: Box<TransmitFn>,
        receive: Box<ReceiveFn>,
    ) -> Self {
        ChildSlot {
            name: name.to_string(),
            target: ChildTarget::Owned(f),
            transmit,
            receive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Steps {
    Fixed(usize),
    /// One step per entity in the environment.
    PerEntity,
}

pub struct Composition {
    pub children: Vec<ChildSlot>,
    pub steps: Steps,
    pub init: Box<InitFn>,
    pub importance: Option<Box<ImportanceFn>>,
    pub groups: Vec<GateGroup>,
    pub gating: GatingMode,
    pub update: Box<UpdateFn>,
    pub predict: Box<PredictFn>,
}

impl Composition {
    /// Identity-wired composition: init and transmitters pass the state,
    /// receivers pass outputs, update keeps the last pad entry, prediction
    /// returns the final state. Callers replace what they need.
    pub fn new(children: Vec<ChildSlot>, steps: Steps) -> Self {
        Composition {
            children,
            steps,
            init: init_fn(|_, _, q| Ok(q.parts.clone())),
            importance: None,
            groups: Vec::new(),
            gating: GatingMode::Learned,
            update: update_fn(|_, _, s, pad, _, _| {
                Ok(pad
                    .entries()
                    .last()
                    .map(|(_, v)| vec![*v])
                    .unwrap_or_else(|| s.clone()))
            }),
            predict: predict_fn(|_, _, states, _| {
                Ok(Msg::many(states.last().expect("initial state").clone()))
            }),
        }
    }
}

pub enum ModuleKind {
    Terminal(Box<TerminalFn>),
    Compositional(Composition),
}

pub struct ModuleSpec {
    pub name: String,
    pub level: u32,
    pub kind: ModuleKind,
    /// Parameter prefixes owned by other modules that this module reads
    /// (shared weights). Aliased parameters follow their owner's trainability.
    pub shared: Vec<String>,
}

impl ModuleSpec {
    pub fn terminal(name: &str, f: Box<TerminalFn>) -> Self {
        ModuleSpec {
            name: name.to_string(),
            level: 0,
            kind: ModuleKind::Terminal(f),
            shared: Vec::new(),
        }
    }

    pub fn compositional(name: &str, level: u32, c: Composition) -> Self {
        ModuleSpec {
            name: name.to_string(),
            level,
            kind: ModuleKind::Compositional(c),
            shared: Vec::new(),
        }
    }

    pub fn child_names(&self) -> Vec<String> {
        match &self.kind {
            ModuleKind::Terminal(_) => Vec::new(),
            ModuleKind::Compositional(c) => c.children.iter().map(|s| s.name.clone()).collect(),
        }
    }

    /// Names of registered modules this one calls.
    pub fn module_children(&self) -> Vec<String> {
        match &self.kind {
            ModuleKind::Terminal(_) => Vec::new(),
            ModuleKind::Compositional(c) => c
                .children
                .iter()
                .filter_map(|s| match &s.target {
                    ChildTarget::Module(m) => Some(m.clone()),
                    ChildTarget::Owned(_) => None,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModuleHandle(usize);

struct Registered {
    spec: ModuleSpec,
    /// Registry index per child slot (None for owned terminals).
    resolved: Vec<Option<usize>>,
}

/// Registered modules plus the parameter store they all read from.
#[derive(Default)]
pub struct Registry {
    modules: Vec<Registered>,
    index: BTreeMap<String, usize>,
    pub params: ParameterSet,
    trained: BTreeSet<String>,
}

/// Result of one top-level run.
#[derive(Debug)]
pub struct Execution {
    pub output: Msg,
    pub trace: Option<Trace>,
    /// Queries the top module sent to its direct children, in call order.
    pub queries: Vec<(String, Msg)>,
}

fn component_err<'a>(
    module: &'a str,
    component: &str,
    step: usize,
) -> impl FnOnce(PmnError) -> PmnError + 'a {
    let component = component.to_string();
    move |e| match e {
        already @ PmnError::Component { .. } => already,
        other => PmnError::Component {
            module: module.to_string(),
            component,
            step,
            source: Box::new(other),
        },
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ModuleSpec) -> Result<ModuleHandle> {
        if self.index.contains_key(&spec.name) {
            return Err(PmnError::Duplicate(spec.name));
        }
        let resolved = match &spec.kind {
            ModuleKind::Terminal(_) => {
                if spec.level != 0 {
                    return Err(PmnError::InvalidSpec {
                        module: spec.name.clone(),
                        msg: format!("terminal modules live at level 0, not {}", spec.level),
                    });
                }
                Vec::new()
            }
            ModuleKind::Compositional(c) => {
                if spec.level == 0 {
                    return Err(PmnError::TerminalWithChildren(spec.name.clone()));
                }
                if c.children.is_empty() {
                    return Err(PmnError::InvalidSpec {
                        module: spec.name.clone(),
                        msg: "compositional module without children".into(),
                    });
                }
                if c.steps == Steps::Fixed(0) {
                    return Err(PmnError::InvalidSpec {
                        module: spec.name.clone(),
                        msg: "step count must be at least 1".into(),
                    });
                }
                let mut seen = BTreeSet::new();
                for slot in &c.children {
                    if !seen.insert(slot.name.as_str()) {
                        return Err(PmnError::Duplicate(format!("{}.{}", spec.name, slot.name)));
                    }
                }
                for g in &c.groups {
                    if g.members.is_empty() {
                        return Err(PmnError::EmptyGroup(g.name.clone()));
                    }
                    if let Some(m) = g.members.iter().find(|m| !seen.contains(m.as_str())) {
                        return Err(PmnError::InvalidSpec {
                            module: spec.name.clone(),
                            msg: format!("group `{}` names unknown child `{m}`", g.name),
                        });
                    }
                }
                let mut resolved = Vec::with_capacity(c.children.len());
                for slot in &c.children {
                    match &slot.target {
                        ChildTarget::Owned(_) => resolved.push(None),
                        ChildTarget::Module(m) => {
                            let &i = self.index.get(m).ok_or_else(|| PmnError::DanglingChild {
                                parent: spec.name.clone(),
                                child: m.clone(),
                            })?;
                            let child_level = self.modules[i].spec.level;
                            if child_level >= spec.level {
                                return Err(PmnError::LevelViolation {
                                    parent: spec.name.clone(),
                                    parent_level: spec.level,
                                    child: m.clone(),
                                    child_level,
                                });
                            }
                            resolved.push(Some(i));
                        }
                    }
                }
                resolved
            }
        };
        let i = self.modules.len();
        self.index.insert(spec.name.clone(), i);
        self.modules.push(Registered { spec, resolved });
        Ok(ModuleHandle(i))
    }

    pub fn handle(&self, name: &str) -> Result<ModuleHandle> {
        self.index
            .get(name)
            .map(|&i| ModuleHandle(i))
            .ok_or_else(|| PmnError::UnknownModule(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn spec(&self, h: ModuleHandle) -> &ModuleSpec {
        &self.modules[h.0].spec
    }

    pub fn module_names(&self) -> impl Iterator<Item = &str> {
        self.modules.iter().map(|m| m.spec.name.as_str())
    }

    pub fn max_level(&self) -> u32 {
        self.modules.iter().map(|m| m.spec.level).max().unwrap_or(0)
    }

    /// Registered modules that list `name` as a child.
    pub fn parents_of(&self, name: &str) -> Vec<String> {
        self.modules
            .iter()
            .filter(|m| m.spec.module_children().iter().any(|c| c == name))
            .map(|m| m.spec.name.clone())
            .collect()
    }

    pub fn mark_trained(&mut self, name: &str) {
        self.trained.insert(name.to_string());
    }

    pub fn is_trained(&self, name: &str) -> bool {
        self.trained.contains(name)
    }

    /// Runs module `h` on query `q`.
    pub fn execute(
        &self,
        tape: &mut Tape,
        h: ModuleHandle,
        q: &Msg,
        env: &Env,
        trace: bool,
    ) -> Result<Execution> {
        let mut queries = Vec::new();
        let (output, trace) = self.run(tape, h.0, q, env, 0, trace, Some(&mut queries))?;
        Ok(Execution {
            output,
            trace,
            queries,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        idx: usize,
        q: &Msg,
        env: &Env,
        depth: u32,
        record: bool,
        mut capture: Option<&mut Vec<(String, Msg)>>,
    ) -> Result<(Msg, Option<Trace>)> {
        let m = &self.modules[idx];
        let name = m.spec.name.as_str();
        if depth > self.max_level() {
            return Err(PmnError::Invariant(format!(
                "call depth {depth} exceeds the highest registered level at `{name}`"
            )));
        }
        let c = match &m.spec.kind {
            ModuleKind::Terminal(f) => {
                return Ok((
                    f(tape, env, q).map_err(component_err(name, "terminal", 0))?,
                    None,
                ));
            }
            ModuleKind::Compositional(c) => c,
        };
        let steps = match c.steps {
            Steps::Fixed(n) => n,
            Steps::PerEntity => env.n,
        };
        let slot_names: Vec<String> = c.children.iter().map(|s| s.name.clone()).collect();
        let mut state = (c.init)(tape, env, q).map_err(component_err(name, "init", 0))?;
        let mut states = vec![state.clone()];
        let mut pad = ScratchPad::default();
        let mut trace_steps = Vec::new();

        for t in 0..steps {
            pad.clear();
            let logits = match (&c.importance, c.gating) {
                (None, _) => None,
                (Some(_), GatingMode::FixedEqual) => Some(tape.zeros(&[c.children.len()])),
                (Some(g), GatingMode::Learned) => {
                    let l = g(tape, &state).map_err(component_err(name, "importance", t))?;
                    if tape.shape(l) != [c.children.len()] {
                        return Err(component_err(name, "importance", t)(PmnError::shape(
                            "importance",
                            tape.shape(l),
                            &[c.children.len()],
                        )));
                    }
                    Some(l)
                }
            };
            let gates = logits.map(|logits| Gates {
                logits,
                slots: &slot_names,
                groups: &c.groups,
            });
            let mut calls = Vec::with_capacity(c.children.len());
            for (slot, resolved) in c.children.iter().zip(&m.resolved) {
                let view = StepView {
                    t,
                    state: &state,
                    pad: &pad,
                    gates: gates.as_ref(),
                };
                let qk = (slot.transmit)(tape, env, &view).map_err(component_err(
                    name,
                    &format!("transmit[{}]", slot.name),
                    t,
                ))?;
                let (ok, sub) = match (&slot.target, resolved) {
                    (ChildTarget::Module(_), Some(ci)) => {
                        self.run(tape, *ci, &qk, env, depth + 1, record, None)?
                    }
                    (ChildTarget::Owned(f), _) => (
                        f(tape, env, &qk).map_err(component_err(name, &slot.name, t))?,
                        None,
                    ),
                    (ChildTarget::Module(child), None) => {
                        return Err(PmnError::Invariant(format!(
                            "unresolved child `{child}` of `{name}`"
                        )))
                    }
                };
                let vk = (slot.receive)(tape, env, &state, &ok, t).map_err(component_err(
                    name,
                    &format!("receive[{}]", slot.name),
                    t,
                ))?;
                pad.push(&slot.name, vk);
                if record {
                    calls.push(TraceCall {
                        name: slot.name.clone(),
                        query_norm: qk.norm(tape),
                        output_norm: Msg::one(vk).norm(tape),
                        trace: sub.map(Box::new),
                    });
                }
                if let Some(cap) = capture.as_deref_mut() {
                    cap.push((slot.name.clone(), qk));
                }
            }
            if record {
                let raw = gates
                    .as_ref()
                    .map(|g| tape.value(g.logits).to_vec())
                    .unwrap_or_default();
                let groups = if raw.is_empty() {
                    Vec::new()
                } else {
                    c.groups
                        .iter()
                        .map(|g| {
                            let sub: Vec<f64> = g
                                .members
                                .iter()
                                .map(|mname| {
                                    raw[slot_names
                                        .iter()
                                        .position(|s| s == mname)
                                        .expect("validated")]
                                })
                                .collect();
                            TraceGroup {
                                members: g.members.clone(),
                                weights: match g.norm {
                                    GroupNorm::Softmax => {
                                        round_group(&normalize_values(&sub, g.norm))
                                    }
                                    GroupNorm::Sigmoid => normalize_values(&sub, g.norm)
                                        .into_iter()
                                        .map(round_sig9)
                                        .collect(),
                                },
                            }
                        })
                        .collect()
                };
                trace_steps.push(TraceStep {
                    t: t + 1,
                    logits: raw,
                    groups,
                    children: calls,
                    state_norms: state.iter().map(|&s| Msg::one(s).norm(tape)).collect(),
                });
            }
            state = (c.update)(tape, env, &state, &pad, gates.as_ref(), t)
                .map_err(component_err(name, "update", t))?;
            states.push(state.clone());
        }
        let out =
            (c.predict)(tape, env, &states, q).map_err(component_err(name, "predict", steps))?;
        let trace = record.then(|| Trace {
            module: name.to_string(),
            level: m.spec.level,
            steps: trace_steps,
        });
        Ok((out, trace))
    }

    /// Call sequence implied by the child lists and step counts alone, for a
    /// scene with `n_entities` entities.
    pub fn reference_calls(&self, h: ModuleHandle, n_entities: usize) -> Vec<String> {
        let mut out = Vec::new();
        self.enumerate(h.0, n_entities, &mut out);
        out
    }

    fn enumerate(&self, idx: usize, n: usize, out: &mut Vec<String>) {
        let m = &self.modules[idx];
        let ModuleKind::Compositional(c) = &m.spec.kind else {
            return;
        };
        let steps = match c.steps {
            Steps::Fixed(k) => k,
            Steps::PerEntity => n,
        };
        for _ in 0..steps {
            for (slot, resolved) in c.children.iter().zip(&m.resolved) {
                out.push(slot.name.clone());
                if let Some(ci) = resolved {
                    self.enumerate(*ci, n, out);
                }
            }
        }
    }
}
