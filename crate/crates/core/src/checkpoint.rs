//! Binary checkpoint container.
//!
//! Layout: magic `BPCK`, format version (u32 LE), header length (u64 LE),
//! JSON header, parameter count (u64 LE), parameters as f64 LE in slot order.

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, Model, ModelError};
use crate::score::Dictionaries;

pub const MAGIC: &[u8; 4] = b"BPCK";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tool_version: String,
    pub architecture: Architecture,
    pub shapes: Vec<SlotShape>,
    pub dictionaries: Dictionaries,
    pub seed: u64,
    /// Echo of the configuration that produced the parameters.
    pub config: serde_json::Value,
}

pub fn save_checkpoint(model: &Model, seed: u64, config: serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        tool_version: TOOL_VERSION.to_string(),
        architecture: model.arch.clone(),
        shapes: model.slots().iter().map(|s| SlotShape { name: s.name.clone(), rows: s.rows, cols: s.cols }).collect(),
        dictionaries: model.dicts.clone(),
        seed,
        config,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + json.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], ModelError> {
    if bytes.len() < n {
        return Err(ModelError::Checkpoint("truncated file".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64, ModelError> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

pub fn load_checkpoint(mut bytes: &[u8]) -> Result<(Model, CheckpointHeader), ModelError> {
    let bytes = &mut bytes;
    if take(bytes, 4)? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = read_u64(bytes)? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(bytes, len)?).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    let mut model = Model::skeleton(header.architecture.clone(), &header.dictionaries)?;
    let shapes_match = model.slots().len() == header.shapes.len()
        && model
            .slots()
            .iter()
            .zip(&header.shapes)
            .all(|(s, h)| s.name == h.name && s.rows == h.rows && s.cols == h.cols);
    if !shapes_match {
        return Err(ModelError::Checkpoint("parameter shapes do not match the architecture".into()));
    }
    let count = read_u64(bytes)? as usize;
    if count != model.param_count() {
        return Err(ModelError::Checkpoint(format!("expected {} parameters, found {count}", model.param_count())));
    }
    let raw = take(bytes, 8 * count)?;
    model.params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if !bytes.is_empty() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let d = Dictionaries { dt: vec![0, 24], t: vec![24, 48, 96], p: vec![60, 62, 64] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let model = Model::with_architecture(Architecture::uniform(v, 5), &d, &mut rng).unwrap();
            let bytes = save_checkpoint(&model, 42, serde_json::json!({"epochs": 3}));
            let (back, header) = load_checkpoint(&bytes).unwrap();
            assert_eq!(back.params, model.params);
            assert_eq!(back.arch, model.arch);
            assert_eq!(back.dicts, d);
            assert_eq!(header.seed, 42);
            assert_eq!(header.config["epochs"], 3);
        }
    }

    #[test]
    fn rejects_damage() {
        let d = Dictionaries { dt: vec![0], t: vec![48], p: vec![60] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::with_architecture(Architecture::uniform(Variant::Mlp, 3), &d, &mut rng).unwrap();
        let bytes = save_checkpoint(&model, 0, serde_json::Value::Null);
        assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(load_checkpoint(b"MThd").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_checkpoint(&extra).is_err());
    }
}
