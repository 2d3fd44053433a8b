//! `AVRF` tensor files: 4 magic bytes, `u32` rank, `rank × u64` dims, then
//! row-major `f32` payload, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use abductive_core::Tensor;

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"AVRF";
/// Refuse absurd headers before allocating.
const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 32;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::Format(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(IoError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel > MAX_ELEMS {
        return Err(IoError::Format(format!("{numel} elements is too large")));
    }
    let mut bytes = vec![0u8; numel as usize * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| IoError::at(path, e))?);
    write_tensor(&mut w, t).map_err(|e| IoError::at(path, e))?;
    w.flush().map_err(|e| IoError::at(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path).map_err(|e| IoError::at(path, e))?);
    read_tensor(&mut r).map_err(|e| e.context(path))
}
