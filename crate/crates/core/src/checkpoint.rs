//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `VOLAGE01`, a `u32` little-endian length followed
//! by that many bytes of UTF-8 JSON ([`CheckpointDoc`]), then every parameter
//! tensor in [`BrainAgeModel::parameters`] order as a `u32` rank, `rank`
//! `u32` extents, and the values as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{BrainAgeModel, ModelConfig};
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"VOLAGE01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDoc {
    pub model: ModelConfig,
    /// Whether input volumes were z-scored during training.
    pub normalize_inputs: bool,
    /// Name of the training cohort.
    pub trained_on: String,
}

pub fn encode_checkpoint(model: &BrainAgeModel, doc: &CheckpointDoc) -> Result<Vec<u8>> {
    if &doc.model != model.config() {
        return Err(Error::Config("checkpoint document config differs from the model's".into()));
    }
    let json = serde_json::to_vec(doc).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.parameters() {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(BrainAgeModel, CheckpointDoc)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected VOLAGE01".into()));
    }
    let len = c.u32("document length")?;
    let doc: CheckpointDoc = serde_json::from_slice(c.take(len, "config document")?)
        .map_err(|e| Error::Checkpoint(format!("config document: {e}")))?;
    let rows = doc
        .model
        .param_table()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let mut tensors = Vec::with_capacity(rows.len());
    for row in &rows {
        let rank = c.u32(&row.name)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32(&row.name)?);
        }
        if shape != row.shape {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {shape:?}, config implies {:?}",
                row.name, row.shape
            )));
        }
        let data = c
            .take(4 * row.count, &row.name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    let model = BrainAgeModel::from_parameters(&doc.model, tensors)?;
    Ok((model, doc))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &BrainAgeModel, doc: &CheckpointDoc) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, doc)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(BrainAgeModel, CheckpointDoc)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
