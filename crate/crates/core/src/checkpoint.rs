//! Checkpoint file format: magic, JSON header (config + per-tensor
//! name/shape index), then one raw little-endian f64 blob. Reload is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"COTCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("blob length mismatch: header wants {0} values, file has {1}")]
    BlobMismatch(usize, usize),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, counted in f64 values.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(model.num_params());
    let mut offset = 0usize;
    for i in 0..model.num_params() {
        let len = model.param_data(i).len();
        entries.push(TensorEntry {
            name: model.param_names()[i].clone(),
            shape: model.param_shape(i).to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&Header { config: model.cfg.clone(), tensors: entries })?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for i in 0..model.num_params() {
        for &v in model.param_data(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut blob_bytes = Vec::new();
    r.read_to_end(&mut blob_bytes)?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if blob_bytes.len() != total * 8 {
        return Err(CheckpointError::BlobMismatch(total, blob_bytes.len() / 8));
    }
    let mut blob = Vec::with_capacity(total);
    for chunk in blob_bytes.chunks_exact(8) {
        blob.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    let mut model = Model::empty(header.config);
    for entry in header.tensors {
        model.add_param(
            &entry.name,
            entry.shape,
            blob[entry.offset..entry.offset + entry.len].to_vec(),
        );
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let cfg = ModelConfig { layers: 2, heads: 2, d_model: 8, max_seq: 12, vocab_size: 10, seed: 5 };
        let model = Model::init(cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.num_params(), model.num_params());
        for i in 0..model.num_params() {
            assert_eq!(loaded.param_names()[i], model.param_names()[i]);
            assert_eq!(loaded.param_shape(i), model.param_shape(i));
            let a = model.param_data(i);
            let b = loaded.param_data(i);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
