use crate::error::{PmnError, Result};
use crate::tasks::Suite;
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointMeta};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Writes every parameter owned by `module` (names under `module.`),
/// including running statistics.
pub fn save_module(suite: &Suite, module: &str, seed: u64, path: &Path) -> Result<()> {
    let h = suite.reg.handle(module)?;
    let spec = suite.reg.spec(h);
    let meta = CheckpointMeta::new(module, spec.level, seed, spec.module_children());
    let w = BufWriter::new(File::create(path)?);
    write_checkpoint(w, meta, &suite.reg.params)
}

/// Loads a checkpoint into an already-built module of the same shape and
/// marks it trained. Its children must already be registered and trained.
pub fn load_module(suite: &mut Suite, path: &Path) -> Result<String> {
    let (meta, tensors) = read_checkpoint(BufReader::new(File::open(path)?))?;
    let h = suite.reg.handle(&meta.module)?;
    let spec = suite.reg.spec(h);
    if spec.level != meta.level {
        return Err(PmnError::Checkpoint(format!(
            "`{}` is level {} in the registry but {} in the checkpoint",
            meta.module, spec.level, meta.level
        )));
    }
    let expected = spec.module_children();
    if expected != meta.children {
        return Err(PmnError::Checkpoint(format!(
            "`{}` calls {:?} in the registry but {:?} in the checkpoint",
            meta.module, expected, meta.children
        )));
    }
    for c in &meta.children {
        if !suite.reg.contains(c) || !suite.reg.is_trained(c) {
            return Err(PmnError::Checkpoint(format!(
                "`{}` needs child `{c}`, which is not loaded",
                meta.module
            )));
        }
    }
    let params = &mut suite.reg.params;
    let owned: Vec<_> = params.ids_with_prefix(&meta.module).collect();
    if owned.len() != meta.entries.len() {
        return Err(PmnError::Checkpoint(format!(
            "`{}` has {} parameters, checkpoint has {}",
            meta.module,
            owned.len(),
            meta.entries.len()
        )));
    }
    let mut staged = Vec::with_capacity(tensors.len());
    for (e, t) in meta.entries.iter().zip(tensors) {
        let id = params.require(&e.name)?;
        if params.value(id).shape() != t.shape() {
            return Err(PmnError::shape(
                "load_checkpoint",
                params.value(id).shape(),
                t.shape(),
            ));
        }
        staged.push((id, t));
    }
    for (id, t) in staged {
        *params.value_mut(id) = t;
    }
    suite.reg.mark_trained(&meta.module);
    Ok(meta.module)
}

/// Modules loaded by [`load_modules`] with how many registered parents call
/// each one.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub references: BTreeMap<String, usize>,
}

/// Loads several checkpoints, lowest level first. A file naming a module
/// that was already loaded in this call is skipped, so a child shared by two
/// parents is read once.
pub fn load_modules(suite: &mut Suite, paths: &[&Path]) -> Result<LoadReport> {
    let mut metas = Vec::with_capacity(paths.len());
    for &p in paths {
        let (meta, _) = read_checkpoint(BufReader::new(File::open(p)?))?;
        metas.push((meta.level, meta.module, p));
    }
    metas.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut report = LoadReport::default();
    for (_, module, p) in metas {
        if report.loaded.contains(&module) {
            continue;
        }
        load_module(suite, p)?;
        report.loaded.push(module);
    }
    for m in &report.loaded {
        report
            .references
            .insert(m.clone(), suite.reg.parents_of(m).len());
    }
    Ok(report)
}
