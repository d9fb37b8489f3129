//! The six task modules and the per-task forward pass (question encoding,
//! module execution, loss and prediction).

mod cap;
mod cnt;
mod qa;
mod rel;
mod terminals;

use super::questions::{Answer, AnswerVocab, QuestionVocab, TaskKind, Template};
use super::world::{related, Scene, World, WorldConfig};
use super::Sample;
use crate::engine::{Env, Execution, GatingMode, Msg, Registry, ScratchPad, Trace};
use crate::error::{PmnError, Result};
use crate::nn::{AttentionMode, Embedding, GruCell, Linear, ParamBuilder, SoftAttention};
use crate::seeds;
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cnt::CntOptions;
pub use qa::QaOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaLoss {
    /// Single-label cross-entropy over the answer vocabulary.
    Ce,
    /// Binary cross-entropy against the one-hot answer.
    Bce,
}

/// Widths and structural knobs of the task modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// State width of the relationship, counting and QA modules.
    pub hidden: usize,
    pub word_dim: usize,
    /// Output width of the object and attribute terminals.
    pub terminal_dim: usize,
    /// Joint width inside soft-attention scorers.
    pub attention_dim: usize,
    pub cap_hidden: usize,
    pub cap_steps: usize,
    pub count_bins: usize,
    pub relations: usize,
    pub qa_loss: QaLoss,
    /// Weight of the supervised loss on the counting module's relationship
    /// query (relational questions only).
    pub aux_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 512,
            word_dim: 300,
            terminal_dim: 300,
            attention_dim: 512,
            cap_hidden: 1000,
            cap_steps: 12,
            count_bins: 8,
            relations: 8,
            qa_loss: QaLoss::Ce,
            aux_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("hidden", self.hidden),
            ("word_dim", self.word_dim),
            ("terminal_dim", self.terminal_dim),
            ("attention_dim", self.attention_dim),
            ("cap_hidden", self.cap_hidden),
            ("cap_steps", self.cap_steps),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(PmnError::Config {
                    path: format!("model.{name}"),
                    msg: "must be positive".into(),
                });
            }
        }
        if self.count_bins < 2 {
            return Err(PmnError::Config {
                path: "model.count_bins".into(),
                msg: "need at least 2 bins".into(),
            });
        }
        if self.relations == 0 || self.relations > super::world::RELATIONS.len() {
            return Err(PmnError::Config {
                path: "model.relations".into(),
                msg: format!("must be in 1..={}", super::world::RELATIONS.len()),
            });
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(PmnError::Config {
                path: "model.aux_weight".into(),
                msg: "must be finite and nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// Caption tokens: pad, bos, eos, `at`, `;`, then categories, attribute sets
/// and cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionVocab {
    pub categories: usize,
    pub attribute_sets: usize,
    pub cells: usize,
}

impl CaptionVocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const AT: usize = 3;
    pub const SEP: usize = 4;

    pub fn new(cfg: &WorldConfig) -> Self {
        CaptionVocab {
            categories: cfg.categories,
            attribute_sets: cfg.attribute_sets(),
            cells: cfg.cells(),
        }
    }

    pub fn len(&self) -> usize {
        5 + self.categories + self.attribute_sets + self.cells
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `<cat> <att> at <cell> ;` per entity in cell order, then `eos`, cut or
    /// padded to `steps` tokens. Returns the tokens and how many of them carry
    /// loss.
    pub fn target(&self, scene: &Scene, steps: usize) -> (Vec<usize>, usize) {
        let mut ents: Vec<_> = scene.entities.iter().collect();
        ents.sort_by_key(|e| e.cell);
        let mut toks = Vec::new();
        for e in ents {
            toks.extend([
                5 + e.category,
                5 + self.categories + e.attributes as usize,
                Self::AT,
                5 + self.categories + self.attribute_sets + e.cell,
                Self::SEP,
            ]);
        }
        toks.push(Self::EOS);
        toks.truncate(steps);
        let live = toks.len();
        toks.resize(steps, Self::PAD);
        (toks, live)
    }
}

/// Question encoder: word embeddings fed through a GRU.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub words: Embedding,
    pub gru: GruCell,
}

impl Encoder {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        vocab: usize,
        word_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Encoder {
            words: Embedding::new(pb, &format!("{name}.words"), vocab, word_dim)?,
            gru: GruCell::new(pb, &format!("{name}.gru"), word_dim, hidden)?,
        })
    }

    pub fn encode(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let xs = tokens
            .iter()
            .map(|&t| self.words.lookup(tape, t))
            .collect::<Result<Vec<_>>>()?;
        self.gru.encode(tape, &xs)
    }
}

/// Query transmitter into a relationship module: a soft choice of reference
/// entity and a distribution over relations, both computed from a key.
#[derive(Clone, Debug)]
pub struct RelQuery {
    pub entity: SoftAttention,
    pub relation: crate::nn::Mlp,
}

impl RelQuery {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        key: usize,
        d: usize,
        joint: usize,
        relations: usize,
    ) -> Result<Self> {
        use crate::nn::{Activation, Mlp};
        Ok(RelQuery {
            entity: SoftAttention::new(
                pb,
                &format!("{name}.entity"),
                key,
                d,
                joint,
                AttentionMode::Softmax,
            )?,
            relation: Mlp::new(
                pb,
                &format!("{name}.relation"),
                &[key, key, relations],
                &[Activation::Relu, Activation::None],
            )?,
        })
    }

    pub fn query(&self, tape: &mut Tape, env: &Env, key: Var) -> Result<Msg> {
        let b = self.entity.attend(tape, key, env.x)?;
        let r = self.relation.forward(tape, key)?;
        let r = tape.softmax(r, 0)?;
        Ok(Msg::many(vec![b, r]))
    }
}

/// Blocks of the counting module that the QA module may share.
#[derive(Clone, Debug)]
pub struct CountShared {
    pub omega: SoftAttention,
    /// Present when the counting module calls the relationship module.
    pub rel_query: Option<RelQuery>,
}

#[derive(Clone, Debug, Default)]
struct Heads {
    obj: Option<Linear>,
    att: Option<Linear>,
    cnt_encoder: Option<Encoder>,
    cnt_shared: Option<CountShared>,
    cnt_children: Vec<String>,
    qa_encoder: Option<Encoder>,
}

/// Registry of task modules plus the pieces that sit outside module
/// execution: question encoders, level-0 classification heads, vocabularies.
pub struct Suite {
    pub reg: Registry,
    pub world: World,
    pub model: ModelConfig,
    pub qvocab: QuestionVocab,
    pub avocab: AnswerVocab,
    pub cvocab: CaptionVocab,
    heads: Heads,
}

/// Loss and prediction for one sample.
#[derive(Debug)]
pub struct Forward {
    pub loss: Var,
    /// Predicted answer id (for captioning: unused, 0).
    pub predicted: usize,
    /// 1/0 correctness, or token accuracy for captioning.
    pub score: f64,
    pub trace: Option<Trace>,
}

pub fn make_env(tape: &mut Tape, rendered: &super::Rendered) -> Env {
    let x = tape.constant(&rendered.x);
    let boxes = tape.constant(&rendered.boxes);
    Env {
        x,
        boxes,
        n: rendered.x.shape()[0],
        d: rendered.x.shape()[1],
    }
}

pub(crate) fn need(pad: &ScratchPad, name: &str) -> Result<Var> {
    pad.get(name)
        .ok_or_else(|| PmnError::invalid("scratch pad", format!("no entry for `{name}`")))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Suite {
    pub fn new(world: &WorldConfig, model: &ModelConfig) -> Result<Self> {
        model.validate()?;
        let world = World::new(world)?;
        Ok(Suite {
            reg: Registry::new(),
            qvocab: QuestionVocab::new(&world.cfg, model.relations),
            avocab: AnswerVocab::new(&world.cfg),
            cvocab: CaptionVocab::new(&world.cfg),
            world,
            model: model.clone(),
            heads: Heads::default(),
        })
    }

    fn rng(seed: u64, module: &str) -> ChaCha8Rng {
        let tag = module
            .bytes()
            .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        ChaCha8Rng::seed_from_u64(seeds::derive(seed, tag))
    }

    pub fn has(&self, module: &str) -> bool {
        self.reg.contains(module)
    }

    /// Children of the counting module as built.
    pub fn cnt_children(&self) -> &[String] {
        &self.heads.cnt_children
    }

    /// Builds the module for `task` with default options.
    pub fn add_default(&mut self, task: TaskKind, seed: u64) -> Result<()> {
        match task {
            TaskKind::Obj => self.add_obj(seed),
            TaskKind::Att => self.add_att(seed),
            TaskKind::Rel => self.add_rel(seed),
            TaskKind::Cap => self.add_cap(seed, GatingMode::Learned),
            TaskKind::Cnt => self.add_cnt(seed, &CntOptions::default()),
            TaskKind::Qa => self.add_qa(seed, &QaOptions::default()),
        }
    }

    fn exec(
        &self,
        tape: &mut Tape,
        module: &str,
        q: &Msg,
        env: &Env,
        trace: bool,
    ) -> Result<Execution> {
        let h = self.reg.handle(module)?;
        self.reg.execute(tape, h, q, env, trace)
    }

    fn subject(sample: &Sample, t: &Template) -> Result<usize> {
        let cell = t
            .cell()
            .ok_or_else(|| PmnError::MalformedQuestion("question names no cell".into()))?;
        sample
            .scene
            .entity_at(cell)
            .ok_or_else(|| PmnError::MalformedQuestion(format!("no entity at cell {cell}")))
    }

    /// Runs the module of `task` on one sample and computes its loss.
    pub fn forward(
        &self,
        tape: &mut Tape,
        task: TaskKind,
        sample: &Sample,
        trace: bool,
    ) -> Result<Forward> {
        let env = make_env(tape, &sample.rendered);
        let template = sample.template;
        let answer = sample.record.answer;
        match task {
            TaskKind::Obj | TaskKind::Att => {
                let t =
                    template.ok_or_else(|| PmnError::Dataset("question record expected".into()))?;
                let i = Self::subject(sample, &t)?;
                let xi = tape.row(env.x, i)?;
                let ex = self.exec(tape, task.name(), &Msg::one(xi), &env, trace)?;
                let e = &sample.scene.entities[i];
                if task == TaskKind::Obj {
                    let head = self
                        .heads
                        .obj
                        .as_ref()
                        .ok_or_else(|| PmnError::UnknownModule("obj".into()))?;
                    let logits = head.forward(tape, ex.output.main())?;
                    let loss = tape.cross_entropy_index(logits, e.category)?;
                    let predicted = self.avocab.id(Answer::Category(argmax(tape.value(logits))));
                    Ok(Forward {
                        loss,
                        predicted,
                        score: (predicted == answer) as u8 as f64,
                        trace: ex.trace,
                    })
                } else {
                    let head = self
                        .heads
                        .att
                        .as_ref()
                        .ok_or_else(|| PmnError::UnknownModule("att".into()))?;
                    let logits = head.forward(tape, ex.output.main())?;
                    let bits: Vec<f64> = (0..self.world.cfg.attributes)
                        .map(|a| ((e.attributes >> a) & 1) as f64)
                        .collect();
                    let loss = tape.bce_with_logits(logits, &bits)?;
                    let mask = tape
                        .value(logits)
                        .iter()
                        .enumerate()
                        .fold(0u32, |m, (a, &l)| if l > 0.0 { m | (1 << a) } else { m });
                    let predicted = self.avocab.id(Answer::AttributeSet(mask));
                    Ok(Forward {
                        loss,
                        predicted,
                        score: (predicted == answer) as u8 as f64,
                        trace: ex.trace,
                    })
                }
            }
            TaskKind::Rel => {
                let t =
                    template.ok_or_else(|| PmnError::Dataset("question record expected".into()))?;
                let i = Self::subject(sample, &t)?;
                let r = t
                    .relation()
                    .ok_or_else(|| PmnError::MalformedQuestion("no relation".into()))?;
                let rel = super::relation_of(r)
                    .ok_or_else(|| PmnError::MalformedQuestion(format!("relation {r}")))?;
                let b = tape.constant(&Tensor::one_hot(env.n, i));
                let rv = tape.constant(&Tensor::one_hot(self.model.relations, r));
                let ex = self.exec(tape, "rel", &Msg::many(vec![b, rv]), &env, trace)?;
                let logits = ex.output.main();
                let targets = related(&sample.scene, rel, i, self.world.cfg.grid);
                let mut multi = vec![0.0; env.n];
                for &j in &targets {
                    multi[j] = 1.0;
                }
                let loss = tape.bce_with_logits(logits, &multi)?;
                let lv = tape.value(logits);
                let pick = (0..env.n)
                    .filter(|&j| lv[j] > 0.0)
                    .min_by_key(|&j| sample.scene.entities[j].cell)
                    .unwrap_or_else(|| argmax(lv));
                let predicted = self
                    .avocab
                    .id(Answer::Cell(sample.scene.entities[pick].cell));
                Ok(Forward {
                    loss,
                    predicted,
                    score: (predicted == answer) as u8 as f64,
                    trace: ex.trace,
                })
            }
            TaskKind::Cnt => {
                let t =
                    template.ok_or_else(|| PmnError::Dataset("question record expected".into()))?;
                let enc = self
                    .heads
                    .cnt_encoder
                    .as_ref()
                    .ok_or_else(|| PmnError::UnknownModule("cnt".into()))?;
                let q = enc.encode(tape, &sample.record.tokens)?;
                let ex = self.exec(tape, "cnt", &Msg::one(q), &env, trace)?;
                let logits = ex.output.main();
                let count = match self.avocab.decode(answer) {
                    Some(Answer::Count(n)) => n,
                    _ => return Err(PmnError::Dataset(format!("answer {answer} is not a count"))),
                };
                let mut loss = tape.cross_entropy_index(logits, count)?;
                if self.model.aux_weight > 0.0 && t.kind().is_relational() {
                    if let Some((_, rq)) = ex.queries.iter().find(|(n, _)| n == "rel") {
                        let aux = self.rel_query_loss(tape, sample, &t, rq)?;
                        let aux = tape.scale(aux, self.model.aux_weight);
                        loss = tape.add(loss, aux)?;
                    }
                }
                let predicted = self.avocab.id(Answer::Count(argmax(tape.value(logits))));
                Ok(Forward {
                    loss,
                    predicted,
                    score: (predicted == answer) as u8 as f64,
                    trace: ex.trace,
                })
            }
            TaskKind::Qa => {
                let enc = self
                    .heads
                    .qa_encoder
                    .as_ref()
                    .ok_or_else(|| PmnError::UnknownModule("qa".into()))?;
                let q = enc.encode(tape, &sample.record.tokens)?;
                let ex = self.exec(tape, "qa", &Msg::one(q), &env, trace)?;
                let logits = ex.output.main();
                if answer >= self.avocab.len() {
                    return Err(PmnError::Dataset(format!(
                        "answer {answer} outside vocabulary"
                    )));
                }
                let loss = match self.model.qa_loss {
                    QaLoss::Ce => tape.cross_entropy_index(logits, answer)?,
                    QaLoss::Bce => tape.bce_with_logits(
                        logits,
                        Tensor::one_hot(self.avocab.len(), answer).data(),
                    )?,
                };
                let predicted = argmax(tape.value(logits));
                Ok(Forward {
                    loss,
                    predicted,
                    score: (predicted == answer) as u8 as f64,
                    trace: ex.trace,
                })
            }
            TaskKind::Cap => {
                let steps = self.model.cap_steps;
                let q = tape.zeros(&[1]);
                let ex = self.exec(tape, "cap", &Msg::one(q), &env, trace)?;
                let logits = ex.output.parts[1];
                let (target, live) = self.cvocab.target(&sample.scene, steps);
                let mut losses = Vec::with_capacity(live);
                let mut hits = 0;
                for (t, &tok) in target.iter().enumerate().take(live) {
                    let row = tape.row(logits, t)?;
                    if argmax(tape.value(row)) == tok {
                        hits += 1;
                    }
                    losses.push(tape.cross_entropy_index(row, tok)?);
                }
                let mut cols = Vec::with_capacity(losses.len());
                for &l in &losses {
                    cols.push(tape.reshape(l, &[1])?);
                }
                let stacked = tape.concat(&cols, 0)?;
                let total = tape.sum(stacked);
                let loss = tape.scale(total, 1.0 / live as f64);
                Ok(Forward {
                    loss,
                    predicted: 0,
                    score: hits as f64 / live as f64,
                    trace: ex.trace,
                })
            }
        }
    }

    /// `−log b[subject] − log r[relation]` on a captured relationship query.
    fn rel_query_loss(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        t: &Template,
        q: &Msg,
    ) -> Result<Var> {
        let i = Self::subject(sample, t)?;
        let r = t
            .relation()
            .ok_or_else(|| PmnError::MalformedQuestion("no relation".into()))?;
        let mut terms = Vec::with_capacity(2);
        for (part, idx) in [(q.parts[0], i), (q.parts[1], r)] {
            let p = tape.slice(part, 0, idx, 1)?;
            let eps = tape.constant_vec(vec![1e-12]);
            let p = tape.add(p, eps)?;
            let l = tape.log(p);
            terms.push(l);
        }
        let both = tape.add(terms[0], terms[1])?;
        let s = tape.sum(both);
        Ok(tape.scale(s, -1.0))
    }
}

#[cfg(test)]
mod tests;
