//! Binary tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "NTSR"
//! version  u32      format version 1; bit 31 set when the payload is float64
//! rank     u32
//! extents  u64 x rank
//! payload  row-major float32 (or float64) values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"NTSR";
pub const FORMAT_VERSION: u32 = 1;
pub const F64_FLAG: u32 = 1 << 31;

/// Serializes `t` with its native element width.
pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let width = match T::DTYPE {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + width * t.numel());
    out.extend_from_slice(MAGIC);
    let version = match T::DTYPE {
        DType::F32 => FORMAT_VERSION,
        DType::F64 => FORMAT_VERSION | F64_FLAG,
    };
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data().iter() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(TensorError::Format(format!("truncated: needed {} more bytes, {} left", n, bytes.len())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn u32_at(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

/// Parses one tensor from the front of `bytes`, converting the payload to `T`.
/// Returns the tensor, the stored element type and the unread remainder.
pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<(Tensor<T>, DType, &[u8])> {
    if take(&mut bytes, 4)? != MAGIC {
        return Err(TensorError::Format("bad magic, expected NTSR".into()));
    }
    let version = u32_at(&mut bytes)?;
    let dtype = if version & F64_FLAG != 0 { DType::F64 } else { DType::F32 };
    if version & !F64_FLAG != FORMAT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", version & !F64_FLAG)));
    }
    let rank = u32_at(&mut bytes)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| TensorError::Format("extent overflows usize".into()))?);
    }
    let n = numel(&shape);
    let data: Vec<T> = match dtype {
        DType::F32 => take(&mut bytes, 4 * n)?
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => take(&mut bytes, 8 * n)?.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
    };
    Ok((Tensor::from_vec(&shape, data)?, dtype, bytes))
}

pub fn write_tensor<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let (t, _, rest) = decode(&buf)?;
    if !rest.is_empty() {
        return Err(TensorError::Format(format!("{} trailing bytes after tensor", rest.len())));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"NTSR");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(b.len(), 12 + 16 + 8);
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn f64_variant_is_flagged() {
        let t = Tensor::<f64>::from_vec(&[1], vec![0.1]).unwrap();
        let b = encode(&t);
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1 | F64_FLAG);
        let (back, dtype, rest) = decode::<f64>(&b).unwrap();
        assert_eq!(dtype, DType::F64);
        assert!(rest.is_empty());
        assert_eq!(back.to_vec(), vec![0.1]);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        assert!(decode::<f32>(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
