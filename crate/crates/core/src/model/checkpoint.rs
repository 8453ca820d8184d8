//! Checkpoint file: magic, a length-prefixed JSON header holding the model
//! configuration and layout, then named tensor records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::layout::LayoutLengths;
use crate::tensor::{read_tensor, write_tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NSCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layout: LayoutLengths,
}

pub fn write_checkpoint(w: &mut impl Write, weights: &ModelWeights) -> Result<()> {
    let header = Header { config: weights.config.clone(), layout: weights.layout()?.lengths() };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let tensors = weights.named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelWeights> {
    let bad = |detail: String| Error::Format { path: "<checkpoint>".into(), detail };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    // Start from a structurally identical model, then overwrite every tensor.
    let mut weights = ModelWeights::init(&header.config, 0)?;
    if weights.layout()?.lengths() != header.layout {
        return Err(bad("layout in header disagrees with model configuration".into()));
    }
    let expected = weights.named_tensors().len();
    let count = read_u32(r)? as usize;
    if count != expected {
        return Err(bad(format!("{count} tensor records, expected {expected}")));
    }
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let t = read_tensor(r)?;
        let slot = weights.tensor_mut(&name).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(weights)
}

pub fn save_checkpoint(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Format { detail, .. } => Error::Format { path: path.to_path_buf(), detail },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_tensor() {
        let cfg = ModelConfig { train_adaln: false, ..ModelConfig::tiny() };
        let mut w = ModelWeights::init(&cfg, 17).unwrap();
        for t in w.trainable_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += i as f32 * 1e-3);
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let w = ModelWeights::init(&ModelConfig::tiny(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Format { .. })));
    }
}
