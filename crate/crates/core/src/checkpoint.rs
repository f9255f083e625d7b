//! Self-describing model checkpoints.
//!
//! Layout (all integers little-endian):
//! `MAGIC` (8 bytes) | version u32 | header length u64 | JSON header |
//! tensor data as f64 LE, in header order.
//!
//! The header carries the model config, the init and training seeds, and
//! the name, kind, shape and offset of every tensor, so a file can be
//! inspected and validated without the code that wrote it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_model, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"LDNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    /// Trainable parameter.
    Param,
    /// Batch-norm running statistic.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset in f64 elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub training_seed: Option<u64>,
    /// Epochs completed when the checkpoint was written.
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `model` and its provenance.
pub fn to_bytes(model: &Model, training_seed: Option<u64>, epoch: Option<usize>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let groups = [
        (TensorKind::Param, model.params()),
        (TensorKind::Buffer, model.buffers()),
    ];
    for (kind, params) in groups {
        for p in params {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                kind,
                shape: p.shape.clone(),
                offset: data.len(),
            });
            data.extend_from_slice(&p.value);
        }
    }
    let header = CheckpointHeader {
        config: *model.config(),
        init_seed: model.init_seed(),
        training_seed,
        epoch,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a checkpoint, rebuilding the model from its config.
pub fn from_bytes(mut bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(take(&mut bytes, len, "header")?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format("data section is not a whole number of f64 values".into()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model = build_model(&header.config, header.init_seed)?;
    let expected: Vec<(TensorKind, String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (TensorKind::Param, p.name.clone(), p.shape.clone()))
        .chain(model.buffers().iter().map(|p| (TensorKind::Buffer, p.name.clone(), p.shape.clone())))
        .collect();
    let stored: Vec<(TensorKind, String, Vec<usize>)> = header
        .tensors
        .iter()
        .map(|t| (t.kind, t.name.clone(), t.shape.clone()))
        .collect();
    if expected != stored {
        return Err(Error::Format("tensor table does not match the stored model config".into()));
    }
    let fill = |dst: &mut Vec<f64>, entry: &TensorEntry| -> Result<()> {
        let n = dst.len();
        let src = data
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Format(format!("data for {} out of range", entry.name)))?;
        dst.copy_from_slice(src);
        Ok(())
    };
    let mut entries = header.tensors.iter();
    for p in model.params_mut() {
        fill(&mut p.value, entries.next().expect("table length checked"))?;
    }
    for p in model.buffers_mut() {
        fill(&mut p.value, entries.next().expect("table length checked"))?;
    }
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total != data.len() {
        return Err(Error::Format(format!(
            "data section holds {} values, header describes {total}",
            data.len()
        )));
    }
    Ok((model, header))
}

pub fn save_checkpoint(model: &Model, training_seed: Option<u64>, epoch: Option<usize>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, training_seed, epoch)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
