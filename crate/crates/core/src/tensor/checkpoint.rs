//! Binary checkpoint: `PMN1`, a u64 little-endian byte length, that many bytes
//! of UTF-8 JSON metadata, then every entry's data as little-endian f64 in
//! metadata order.

use super::params::ParameterSet;
use super::Tensor;
use crate::error::{PmnError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"PMN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub module: String,
    pub level: u32,
    pub seed: u64,
    /// Modules whose parameters must already be present when loading.
    pub children: Vec<String>,
    pub entries: Vec<CheckpointEntry>,
}

impl CheckpointMeta {
    pub fn new(module: &str, level: u32, seed: u64, children: Vec<String>) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            module: module.to_string(),
            level,
            seed,
            children,
            entries: Vec::new(),
        }
    }
}

/// Writes the entries of `params` under `meta.module` (name-ordered). Any
/// entries already listed in `meta` are replaced.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    mut meta: CheckpointMeta,
    params: &ParameterSet,
) -> Result<()> {
    let ids: Vec<_> = params.ids_with_prefix(&meta.module).collect();
    meta.entries = ids
        .iter()
        .map(|&id| CheckpointEntry {
            name: params.name(id).to_string(),
            shape: params.value(id).shape().to_vec(),
        })
        .collect();
    let doc = serde_json::to_vec(&meta)?;
    w.write_all(MAGIC)?;
    w.write_all(&(doc.len() as u64).to_le_bytes())?;
    w.write_all(&doc)?;
    for id in ids {
        for x in params.value(id).data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointMeta, Vec<Tensor>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| PmnError::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(PmnError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| PmnError::Checkpoint("truncated header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut doc = vec![0u8; len];
    r.read_exact(&mut doc)
        .map_err(|_| PmnError::Checkpoint("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&doc)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(PmnError::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(meta.entries.len());
    let mut buf = [0u8; 8];
    for e in &meta.entries {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| PmnError::Checkpoint(format!("truncated data for `{}`", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    #[test]
    fn round_trip_is_bitwise() {
        let mut ps = ParameterSet::new();
        ps.add(
            "a.w",
            Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        ps.add(
            "a.b",
            Tensor::vector(vec![std::f64::consts::PI]),
            ParamKind::Buffer,
        )
        .unwrap();
        ps.add("b.w", Tensor::vector(vec![9.0]), ParamKind::Weight)
            .unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, CheckpointMeta::new("a", 0, 7, vec![]), &ps).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let (meta, tensors) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(meta.entries.len(), 2);
        assert_eq!(meta.seed, 7);
        for (e, t) in meta.entries.iter().zip(&tensors) {
            let orig = ps.value(ps.require(&e.name).unwrap());
            let a: Vec<u64> = orig.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_checkpoint(&b"PMN2\0\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, PmnError::Checkpoint(_)));
    }
}
