//! Flat binary tensor layout used for model checkpoints: an 8-byte
//! little-endian extent count, the extents (8-byte little-endian each), then
//! the values as 8-byte little-endian IEEE-754 doubles.

use std::io::{Read, Write};

use super::{Tensor, TensorError};

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorError> {
    let rank = read_u64(r)? as usize;
    if rank > 64 {
        return Err(TensorError::Corrupt(format!("rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        let e = read_u64(r)? as usize;
        len = len
            .checked_mul(e)
            .ok_or_else(|| TensorError::Corrupt("extent overflow".into()))?;
        shape.push(e);
    }
    let mut values = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, values)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
