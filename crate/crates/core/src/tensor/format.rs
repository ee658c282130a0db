//! `FTEN` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FTEN" | version: u8 = 1 | rank: u32 | dims: rank x u64 | payload: f64 x prod(dims)
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{FlowError, Result};

pub const FTEN_MAGIC: &[u8; 4] = b"FTEN";
pub const FTEN_VERSION: u8 = 1;

fn bad(reason: impl Into<String>) -> FlowError {
    FlowError::Format {
        kind: "FTEN",
        reason: reason.into(),
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(FTEN_MAGIC)?;
    w.write_all(&[FTEN_VERSION])?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != FTEN_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    read_exact(r, &mut version)?;
    if version[0] != FTEN_VERSION {
        return Err(bad(format!("unsupported version {}", version[0])));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 16 {
        return Err(bad(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows"))?;
    let mut payload = vec![0u8; n.checked_mul(8).ok_or_else(|| bad("payload too large"))?];
    read_exact(r, &mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after payload")),
        Err(e) => return Err(bad(e.to_string())),
    }
    Tensor::new(shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| bad(format!("truncated: {e}")))
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| FlowError::io(path, e))?,
        );
        write_tensor(&mut f, self).map_err(|e| FlowError::io(path, e))?;
        f.flush().map_err(|e| FlowError::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| FlowError::io(path, e))?);
        read_tensor(&mut f)
    }
}
