use super::world::{related, Relation, Scene, WorldConfig, RELATIONS};
use crate::error::{PmnError, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Largest count in the counting answer space.
pub const MAX_COUNT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Obj,
    Att,
    Rel,
    Cnt,
    Qa,
    Cap,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Obj => "obj",
            TaskKind::Att => "att",
            TaskKind::Rel => "rel",
            TaskKind::Cnt => "cnt",
            TaskKind::Qa => "qa",
            TaskKind::Cap => "cap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "obj" => TaskKind::Obj,
            "att" => TaskKind::Att,
            "rel" => TaskKind::Rel,
            "cnt" => TaskKind::Cnt,
            "qa" => TaskKind::Qa,
            "cap" => TaskKind::Cap,
            other => return Err(PmnError::Dataset(format!("unknown task `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    ObjAt,
    AttOf,
    RelWhich,
    CountCat,
    CountRel,
    CountCatRel,
    CategoryRel,
}

pub const TEMPLATE_KINDS: [TemplateKind; 7] = [
    TemplateKind::ObjAt,
    TemplateKind::AttOf,
    TemplateKind::RelWhich,
    TemplateKind::CountCat,
    TemplateKind::CountRel,
    TemplateKind::CountCatRel,
    TemplateKind::CategoryRel,
];

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::ObjAt => "obj-at",
            TemplateKind::AttOf => "att-of",
            TemplateKind::RelWhich => "rel-which",
            TemplateKind::CountCat => "count-cat",
            TemplateKind::CountRel => "count-rel",
            TemplateKind::CountCatRel => "count-cat-rel",
            TemplateKind::CategoryRel => "category-rel",
        }
    }

    pub fn is_relational(self) -> bool {
        matches!(
            self,
            TemplateKind::RelWhich
                | TemplateKind::CountRel
                | TemplateKind::CountCatRel
                | TemplateKind::CategoryRel
        )
    }
}

/// A question with its arguments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    /// what category is at cell
    ObjAt { cell: usize },
    /// what attributes has the entity at cell
    AttOf { cell: usize },
    /// which entity is <rel> of the entity at cell
    RelWhich { rel: usize, cell: usize },
    /// how many <cat>
    CountCat { cat: usize },
    /// how many entities are <rel> of the entity at cell
    CountRel { rel: usize, cell: usize },
    /// how many <cat> are <rel> of the entity at cell
    CountCatRel { cat: usize, rel: usize, cell: usize },
    /// what category is <rel> of the entity at cell
    CategoryRel { rel: usize, cell: usize },
}

impl Template {
    pub fn kind(&self) -> TemplateKind {
        match self {
            Template::ObjAt { .. } => TemplateKind::ObjAt,
            Template::AttOf { .. } => TemplateKind::AttOf,
            Template::RelWhich { .. } => TemplateKind::RelWhich,
            Template::CountCat { .. } => TemplateKind::CountCat,
            Template::CountRel { .. } => TemplateKind::CountRel,
            Template::CountCatRel { .. } => TemplateKind::CountCatRel,
            Template::CategoryRel { .. } => TemplateKind::CategoryRel,
        }
    }

    pub fn relation(&self) -> Option<usize> {
        match *self {
            Template::RelWhich { rel, .. }
            | Template::CountRel { rel, .. }
            | Template::CountCatRel { rel, .. }
            | Template::CategoryRel { rel, .. } => Some(rel),
            _ => None,
        }
    }

    pub fn cell(&self) -> Option<usize> {
        match *self {
            Template::ObjAt { cell }
            | Template::AttOf { cell }
            | Template::RelWhich { cell, .. }
            | Template::CountRel { cell, .. }
            | Template::CountCatRel { cell, .. }
            | Template::CategoryRel { cell, .. } => Some(cell),
            Template::CountCat { .. } => None,
        }
    }
}

const WORD_WHAT_CATEGORY_AT: usize = 0;
const WORD_WHAT_ATTRIBUTES_OF: usize = 1;
const WORD_WHICH_IS: usize = 2;
const WORD_HOW_MANY: usize = 3;
const WORD_WHAT_CATEGORY_IS: usize = 4;
const LEAD_WORDS: usize = 5;

/// Token ids of questions: lead words, then categories, relations, cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionVocab {
    pub categories: usize,
    pub relations: usize,
    pub cells: usize,
}

impl QuestionVocab {
    pub fn new(cfg: &WorldConfig, relations: usize) -> Self {
        QuestionVocab {
            categories: cfg.categories,
            relations,
            cells: cfg.cells(),
        }
    }

    pub fn len(&self) -> usize {
        LEAD_WORDS + self.categories + self.relations + self.cells
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn cat(&self, c: usize) -> usize {
        LEAD_WORDS + c
    }

    fn rel(&self, r: usize) -> usize {
        LEAD_WORDS + self.categories + r
    }

    fn cell(&self, i: usize) -> usize {
        LEAD_WORDS + self.categories + self.relations + i
    }

    pub fn encode(&self, t: &Template) -> Vec<usize> {
        match *t {
            Template::ObjAt { cell } => vec![WORD_WHAT_CATEGORY_AT, self.cell(cell)],
            Template::AttOf { cell } => vec![WORD_WHAT_ATTRIBUTES_OF, self.cell(cell)],
            Template::RelWhich { rel, cell } => vec![WORD_WHICH_IS, self.rel(rel), self.cell(cell)],
            Template::CountCat { cat } => vec![WORD_HOW_MANY, self.cat(cat)],
            Template::CountRel { rel, cell } => vec![WORD_HOW_MANY, self.rel(rel), self.cell(cell)],
            Template::CountCatRel { cat, rel, cell } => {
                vec![WORD_HOW_MANY, self.cat(cat), self.rel(rel), self.cell(cell)]
            }
            Template::CategoryRel { rel, cell } => {
                vec![WORD_WHAT_CATEGORY_IS, self.rel(rel), self.cell(cell)]
            }
        }
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<Template> {
        let bad = || PmnError::MalformedQuestion(format!("{tokens:?}"));
        let as_cat = |t: usize| {
            (LEAD_WORDS..LEAD_WORDS + self.categories)
                .contains(&t)
                .then(|| t - LEAD_WORDS)
        };
        let r0 = LEAD_WORDS + self.categories;
        let as_rel = |t: usize| (r0..r0 + self.relations).contains(&t).then(|| t - r0);
        let c0 = r0 + self.relations;
        let as_cell = |t: usize| (c0..c0 + self.cells).contains(&t).then(|| t - c0);
        let t = match *tokens {
            [WORD_WHAT_CATEGORY_AT, c] => Template::ObjAt {
                cell: as_cell(c).ok_or_else(bad)?,
            },
            [WORD_WHAT_ATTRIBUTES_OF, c] => Template::AttOf {
                cell: as_cell(c).ok_or_else(bad)?,
            },
            [WORD_WHICH_IS, r, c] => Template::RelWhich {
                rel: as_rel(r).ok_or_else(bad)?,
                cell: as_cell(c).ok_or_else(bad)?,
            },
            [WORD_HOW_MANY, c] => Template::CountCat {
                cat: as_cat(c).ok_or_else(bad)?,
            },
            [WORD_HOW_MANY, r, c] => Template::CountRel {
                rel: as_rel(r).ok_or_else(bad)?,
                cell: as_cell(c).ok_or_else(bad)?,
            },
            [WORD_HOW_MANY, k, r, c] => Template::CountCatRel {
                cat: as_cat(k).ok_or_else(bad)?,
                rel: as_rel(r).ok_or_else(bad)?,
                cell: as_cell(c).ok_or_else(bad)?,
            },
            [WORD_WHAT_CATEGORY_IS, r, c] => Template::CategoryRel {
                rel: as_rel(r).ok_or_else(bad)?,
                cell: as_cell(c).ok_or_else(bad)?,
            },
            _ => return Err(bad()),
        };
        Ok(t)
    }
}

/// Shared answer ids: categories, attribute sets, cells, counts `0..=12`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerVocab {
    pub categories: usize,
    pub attribute_sets: usize,
    pub cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Answer {
    Category(usize),
    AttributeSet(u32),
    Cell(usize),
    Count(usize),
}

impl AnswerVocab {
    pub fn new(cfg: &WorldConfig) -> Self {
        AnswerVocab {
            categories: cfg.categories,
            attribute_sets: cfg.attribute_sets(),
            cells: cfg.cells(),
        }
    }

    pub fn len(&self) -> usize {
        self.categories + self.attribute_sets + self.cells + MAX_COUNT + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, a: Answer) -> usize {
        match a {
            Answer::Category(c) => c,
            Answer::AttributeSet(m) => self.categories + m as usize,
            Answer::Cell(i) => self.categories + self.attribute_sets + i,
            Answer::Count(n) => self.categories + self.attribute_sets + self.cells + n,
        }
    }

    pub fn decode(&self, id: usize) -> Option<Answer> {
        let mut i = id;
        if i < self.categories {
            return Some(Answer::Category(i));
        }
        i -= self.categories;
        if i < self.attribute_sets {
            return Some(Answer::AttributeSet(i as u32));
        }
        i -= self.attribute_sets;
        if i < self.cells {
            return Some(Answer::Cell(i));
        }
        i -= self.cells;
        (i <= MAX_COUNT).then_some(Answer::Count(i))
    }
}

/// Brute-force answer; `None` when the question does not apply to the scene.
pub fn answer_template(scene: &Scene, t: &Template, grid: usize) -> Option<Answer> {
    let subject = |cell: usize| scene.entity_at(cell);
    let rel = |r: usize| RELATIONS.get(r).copied();
    let count = |n: usize| (n <= MAX_COUNT).then_some(Answer::Count(n));
    match *t {
        Template::ObjAt { cell } => {
            subject(cell).map(|i| Answer::Category(scene.entities[i].category))
        }
        Template::AttOf { cell } => {
            subject(cell).map(|i| Answer::AttributeSet(scene.entities[i].attributes))
        }
        Template::RelWhich { rel: r, cell } => {
            let targets = related(scene, rel(r)?, subject(cell)?, grid);
            targets
                .iter()
                .map(|&j| scene.entities[j].cell)
                .min()
                .map(Answer::Cell)
        }
        Template::CountCat { cat } => {
            count(scene.entities.iter().filter(|e| e.category == cat).count())
        }
        Template::CountRel { rel: r, cell } => {
            count(related(scene, rel(r)?, subject(cell)?, grid).len())
        }
        Template::CountCatRel { cat, rel: r, cell } => count(
            related(scene, rel(r)?, subject(cell)?, grid)
                .into_iter()
                .filter(|&j| scene.entities[j].category == cat)
                .count(),
        ),
        Template::CategoryRel { rel: r, cell } => {
            match related(scene, rel(r)?, subject(cell)?, grid)[..] {
                [j] => Some(Answer::Category(scene.entities[j].category)),
                _ => None,
            }
        }
    }
}

/// Answer id of a tokenized question, by exhaustive enumeration.
pub fn oracle_answer(
    scene: &Scene,
    tokens: &[usize],
    cfg: &WorldConfig,
    relations: usize,
) -> Result<usize> {
    let qv = QuestionVocab::new(cfg, relations);
    let t = qv.decode(tokens)?;
    let a = answer_template(scene, &t, cfg.grid).ok_or_else(|| {
        PmnError::MalformedQuestion(format!("{tokens:?} does not apply to scene {}", scene.seed))
    })?;
    Ok(AnswerVocab::new(cfg).id(a))
}

/// Relative frequency of each template when sampling questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuestionMix {
    pub obj_at: f64,
    pub att_of: f64,
    pub rel_which: f64,
    pub count_cat: f64,
    pub count_rel: f64,
    pub count_cat_rel: f64,
    pub category_rel: f64,
}

impl Default for QuestionMix {
    fn default() -> Self {
        QuestionMix {
            obj_at: 0.0,
            att_of: 0.0,
            rel_which: 0.0,
            count_cat: 0.0,
            count_rel: 0.0,
            count_cat_rel: 0.0,
            category_rel: 0.0,
        }
    }
}

impl QuestionMix {
    pub fn for_task(task: TaskKind) -> Self {
        let z = QuestionMix::default();
        match task {
            TaskKind::Obj => QuestionMix { obj_at: 1.0, ..z },
            TaskKind::Att => QuestionMix { att_of: 1.0, ..z },
            TaskKind::Rel => QuestionMix {
                rel_which: 1.0,
                ..z
            },
            TaskKind::Cnt => QuestionMix {
                count_cat: 0.5,
                count_rel: 0.5,
                ..z
            },
            TaskKind::Qa => QuestionMix {
                obj_at: 0.2,
                att_of: 0.2,
                count_cat: 0.2,
                count_rel: 0.2,
                category_rel: 0.2,
                ..z
            },
            TaskKind::Cap => z,
        }
    }

    pub fn weight(&self, k: TemplateKind) -> f64 {
        match k {
            TemplateKind::ObjAt => self.obj_at,
            TemplateKind::AttOf => self.att_of,
            TemplateKind::RelWhich => self.rel_which,
            TemplateKind::CountCat => self.count_cat,
            TemplateKind::CountRel => self.count_rel,
            TemplateKind::CountCatRel => self.count_cat_rel,
            TemplateKind::CategoryRel => self.category_rel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws: Vec<f64> = TEMPLATE_KINDS.iter().map(|&k| self.weight(k)).collect();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PmnError::Config {
                path: "mix".into(),
                msg: "weights must be finite and nonnegative".into(),
            });
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(PmnError::Config {
                path: "mix".into(),
                msg: "at least one weight must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub tokens: Vec<usize>,
    pub template: Template,
    pub answer: usize,
}

/// Samples up to `count` questions for a scene. Templates that do not apply
/// to the scene are skipped, never answered with a made-up label.
pub fn make_questions(
    scene: &Scene,
    cfg: &WorldConfig,
    relations: usize,
    mix: &QuestionMix,
    seed: u64,
    count: usize,
) -> Result<Vec<Question>> {
    mix.validate()?;
    let qv = QuestionVocab::new(cfg, relations);
    let av = AnswerVocab::new(cfg);
    let weights: Vec<f64> = TEMPLATE_KINDS.iter().map(|&k| mix.weight(k)).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| PmnError::Config {
        path: "mix".into(),
        msg: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 8 {
        if out.len() == count {
            break;
        }
        let cell = scene.entities[rng.gen_range(0..scene.len())].cell;
        let cat = rng.gen_range(0..cfg.categories);
        let rel = rng.gen_range(0..relations);
        let t = match TEMPLATE_KINDS[pick.sample(&mut rng)] {
            TemplateKind::ObjAt => Template::ObjAt { cell },
            TemplateKind::AttOf => Template::AttOf { cell },
            TemplateKind::RelWhich => Template::RelWhich { rel, cell },
            TemplateKind::CountCat => Template::CountCat { cat },
            TemplateKind::CountRel => Template::CountRel { rel, cell },
            TemplateKind::CountCatRel => Template::CountCatRel { cat, rel, cell },
            TemplateKind::CategoryRel => Template::CategoryRel { rel, cell },
        };
        if let Some(a) = answer_template(scene, &t, cfg.grid) {
            out.push(Question {
                tokens: qv.encode(&t),
                template: t,
                answer: av.id(a),
            });
        }
    }
    Ok(out)
}

pub fn relation_of(index: usize) -> Option<Relation> {
    RELATIONS.get(index).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::world::Entity;

    fn ent(category: usize, cell: usize, grid: usize) -> Entity {
        let (row, col) = (cell / grid, cell % grid);
        Entity {
            category,
            attributes: 0,
            cell,
            x: (col as f64 + 0.5) / grid as f64,
            y: (row as f64 + 0.5) / grid as f64,
        }
    }

    #[test]
    fn counts_category() {
        let cfg = WorldConfig::default();
        let scene = Scene {
            seed: 0,
            entities: vec![ent(2, 0, 4), ent(1, 1, 4), ent(2, 5, 4), ent(2, 9, 4)],
        };
        let qv = QuestionVocab::new(&cfg, 8);
        let toks = qv.encode(&Template::CountCat { cat: 2 });
        let av = AnswerVocab::new(&cfg);
        assert_eq!(
            oracle_answer(&scene, &toks, &cfg, 8).unwrap(),
            av.id(Answer::Count(3))
        );
    }

    #[test]
    fn tokens_round_trip() {
        let cfg = WorldConfig::default();
        let qv = QuestionVocab::new(&cfg, 8);
        for t in [
            Template::ObjAt { cell: 3 },
            Template::AttOf { cell: 15 },
            Template::RelWhich { rel: 7, cell: 0 },
            Template::CountCat { cat: 5 },
            Template::CountRel { rel: 2, cell: 4 },
            Template::CountCatRel {
                cat: 1,
                rel: 3,
                cell: 9,
            },
            Template::CategoryRel { rel: 0, cell: 1 },
        ] {
            assert_eq!(qv.decode(&qv.encode(&t)).unwrap(), t);
        }
        assert!(matches!(
            qv.decode(&[99, 1]),
            Err(PmnError::MalformedQuestion(_))
        ));
        assert!(qv.decode(&[]).is_err());
    }

    #[test]
    fn answer_ids_round_trip() {
        let av = AnswerVocab::new(&WorldConfig::default());
        assert_eq!(av.len(), 6 + 8 + 16 + 13);
        for id in 0..av.len() {
            assert_eq!(av.id(av.decode(id).unwrap()), id);
        }
        assert_eq!(av.decode(av.len()), None);
    }

    #[test]
    fn relation_without_target_is_skipped() {
        let cfg = WorldConfig::default();
        let scene = Scene {
            seed: 0,
            entities: vec![ent(0, 0, 4)],
        };
        assert_eq!(
            answer_template(&scene, &Template::RelWhich { rel: 0, cell: 0 }, 4),
            None
        );
        let mix = QuestionMix::for_task(TaskKind::Rel);
        assert!(make_questions(&scene, &cfg, 8, &mix, 1, 10)
            .unwrap()
            .is_empty());
    }
}
