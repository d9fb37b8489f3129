//! Synthetic progressive task suite: scenes of entities on a grid, templated
//! questions answered by brute force, and the six task modules.

mod dataset;
mod modules;
mod questions;
mod world;

pub use dataset::{
    generate_dataset, materialize, read_jsonl, verify, write_jsonl, DatasetSpec, Record, Sample,
};
pub use modules::{
    make_env, CaptionVocab, CntOptions, CountShared, Encoder, Forward, ModelConfig, QaLoss,
    QaOptions, RelQuery, Suite,
};
pub use questions::{
    answer_template, make_questions, oracle_answer, relation_of, Answer, AnswerVocab, Question,
    QuestionMix, QuestionVocab, TaskKind, Template, TemplateKind, MAX_COUNT, TEMPLATE_KINDS,
};
pub use world::{
    generate_scene, related, Entity, Relation, Rendered, Scene, World, WorldConfig, RELATIONS,
};
