//! "DTNSR v1" tensor files.
//!
//! Layout: the 8 magic bytes `DTNSR1\0\0`, a little-endian `u32` rank,
//! `rank` little-endian `u64` dimensions, then the elements as little-endian
//! IEEE-754 `f32` in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"DTNSR1\0\0";

#[derive(Debug, Error)]
pub enum DtnsrError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 8]),
    #[error("implausible header: {0}")]
    Header(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write<W: Write>(mut w: W, t: &Tensor) -> Result<(), DtnsrError> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor, DtnsrError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DtnsrError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 16 {
        return Err(DtnsrError::Header(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| DtnsrError::Header("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1 << 34))
        .ok_or_else(|| DtnsrError::Header(format!("shape {shape:?} too large")))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, DtnsrError> {
    let mut cursor = bytes;
    let t = read(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(DtnsrError::Header(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tensor) -> Result<(), DtnsrError> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor, DtnsrError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[20..28], &1u64.to_le_bytes());
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(DtnsrError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = encode(&t);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
