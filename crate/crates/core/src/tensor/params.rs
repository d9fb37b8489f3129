use super::Tensor;
use crate::error::{PmnError, Result};
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights are optimized; buffers (running statistics) are only ever written
/// by their owning module's statistics update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Named parameter store with per-entry trainable flags and Adam state.
///
/// Names are dotted paths; the first segment is the owning module, so
/// `rel.update.0.w` belongs to module `rel`.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PmnError::Duplicate(name));
        }
        let id = ParamId(self.entries.len());
        let n = value.len();
        self.entries.push(ParamEntry {
            name: name.clone(),
            value,
            kind,
            trainable: true,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| PmnError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Adam step counter of an entry.
    pub fn step_count(&self, id: ParamId) -> u64 {
        self.entries[id.0].t
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids in name order, restricted to names under `prefix.` (or equal to it).
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.index
            .iter()
            .filter(move |(name, _)| has_prefix(name, prefix))
            .map(|(_, id)| *id)
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if has_prefix(&e.name, prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub(crate) fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies values (not optimizer state) of every entry under `prefix` from `other`.
    pub fn copy_values_from(&mut self, other: &ParameterSet, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for id in other.ids_with_prefix(prefix).collect::<Vec<_>>() {
            let name = other.name(id);
            let dst = self.require(name)?;
            let src = other.value(id);
            if self.value(dst).shape() != src.shape() {
                return Err(PmnError::shape(
                    "copy_values_from",
                    self.value(dst).shape(),
                    src.shape(),
                ));
            }
            *self.value_mut(dst) = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

pub(crate) fn has_prefix(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn init_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Dense per-parameter gradient accumulator. Accumulation is additive; call
/// [`ParamGrads::zero`] between steps.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    slots: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(num_params: usize) -> Self {
        ParamGrads {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(grad);
    }

    pub fn add(&mut self, id: ParamId, grad: &[f64]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            slot => *slot = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn zero(&mut self) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Ensures every trainable weight has a (possibly zero) slot.
    pub fn fill_trainable(&mut self, params: &ParameterSet) {
        for id in params.ids() {
            if params.is_trainable(id)
                && params.kind(id) == ParamKind::Weight
                && self.get(id).is_none()
            {
                self.set(id, vec![0.0; params.value(id).len()]);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
