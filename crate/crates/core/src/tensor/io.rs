use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

/// Leading bytes of every serialized tensor.
pub const TENSOR_MAGIC: [u8; 8] = *b"NSTENSOR";

const MAX_RANK: u32 = 8;

/// Writes magic, `u32` rank, `u64` extents and the `f32` data, all little-endian.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let bad = |detail: String| Error::Format { path: "<stream>".into(), detail };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| bad(format!("extents {shape:?} overflow")))?;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        read_tensor(&mut r).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format { path: path.to_path_buf(), detail },
            other => other,
        })
    }
}
