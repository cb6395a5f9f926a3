//! Checkpoint files: one archive holding the model config plus every named
//! parameter array. Layout: magic, little-endian u64 header length, a JSON
//! header with the config and a parameter manifest, then raw f32 LE data in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"HPCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    BadHeader(serde_json::Error),
    #[error("checkpoint data truncated")]
    Truncated,
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let header = Header {
        config: model.cfg.clone(),
        params: model
            .store
            .iter()
            .map(|(_, name, value)| ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_u64::<LittleEndian>(header_json.len() as u64)
        .map_err(io_err)?;
    file.write_all(&header_json).map_err(io_err)?;
    for (_, _, value) in model.store.iter() {
        for &v in value.iter() {
            file.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    file.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = file.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(CheckpointError::BadHeader)?;

    let mut model = Model::new(header.config)?;
    if header.params.len() != model.store.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "checkpoint has {} params, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for (entry, id) in header.params.iter().zip(ids) {
        if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape {
            return Err(CheckpointError::ParamMismatch(format!(
                "param {} (shape {:?}) does not match model {} (shape {:?})",
                entry.name,
                entry.shape,
                model.store.name(id),
                model.store.get(id).shape()
            )));
        }
        let count: usize = entry.shape.iter().product();
        let mut data = vec![0f32; count];
        file.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| CheckpointError::Truncated)?;
        model
            .store
            .set(id, ArrayD::from_shape_vec(IxDyn(&entry.shape), data).unwrap());
    }
    Ok(model)
}
