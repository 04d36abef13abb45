//! The HSTN binary tensor format.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "HSTN"
//! 4       4           version (u32, = 1)
//! 8       1           dtype code (0 = f32, 1 = f64)
//! 9       4           rank (u32)
//! 13      8 * rank    extents (u64 each)
//! ..      n * size    row-major payload
//! ```
//!
//! All integers and scalars are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::{check_dims, Tensor};

pub const MAGIC: [u8; 4] = *b"HSTN";
pub const VERSION: u32 = 1;

/// A tensor read from disk whose element type is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to the requested element type (lossless when widening).
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * t.rank() + T::DTYPE.size() * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn truncated(expected: usize, actual: usize) -> Error {
    Error::TruncatedPayload {
        expected: expected as u64,
        actual: actual as u64,
    }
}

/// Parses the header and checks the total length. Returns dtype, dims and header length.
fn parse_header(bytes: &[u8], total_len: usize) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 13 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(truncated(13, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(bytes[8]).ok_or(Error::UnsupportedDtype(bytes[8]))?;
    let rank = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let header_len = 13 + 8 * rank;
    if bytes.len() < header_len {
        return Err(truncated(header_len, bytes.len()));
    }
    let dims: Vec<usize> = bytes[13..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = check_dims(&dims)?;
    let expected = header_len + n * dtype.size();
    if total_len < expected {
        return Err(truncated(expected, total_len));
    }
    if total_len > expected {
        return Err(Error::input(format!(
            "{} trailing bytes after tensor payload",
            total_len - expected
        )));
    }
    Ok((dtype, dims, header_len))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (dtype, dims, header_len) = parse_header(bytes, bytes.len())?;
    let payload = &bytes[header_len..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_vec(
            &dims,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::from_vec(
            &dims,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    })
}

pub fn write_tensor<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&fs::read(path)?)
}

/// Reads only the header of a tensor file and checks the file length against it.
pub fn read_header(path: impl AsRef<Path>) -> Result<(DType, Vec<usize>)> {
    let mut f = fs::File::open(path)?;
    let total = f.metadata()?.len() as usize;
    let mut head = Vec::with_capacity(13);
    (&mut f).take(13).read_to_end(&mut head)?;
    if head.len() == 13 && head[..4] == MAGIC {
        let rank = u32::from_le_bytes(head[9..13].try_into().unwrap()) as u64;
        f.take(8 * rank.min(64)).read_to_end(&mut head)?;
    }
    let (dtype, dims, _) = parse_header(&head, total)?;
    Ok((dtype, dims))
}

/// Reads a tensor and requires it to be stored with element type `T`.
pub fn read_tensor_as<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let any = read_tensor(path)?;
    if any.dtype() != T::DTYPE {
        return Err(Error::DtypeMismatch {
            expected: T::DTYPE.name(),
            found: any.dtype().name(),
        });
    }
    Ok(any.into_real())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"HSTN");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(&b[9..13], &[1, 0, 0, 0]);
        assert_eq!(&b[13..21], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[21..25], &1.0f32.to_le_bytes());
        assert_eq!(&b[25..29], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), 29);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hstn");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f32>::uniform(&[3, 5, 7], -1.0, 1.0, &mut rng);
        write_tensor(&t, &path).unwrap();
        let back = read_tensor_as::<f32>(&path).unwrap();
        assert!(t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.dims(), &[3, 5, 7]);
        assert!(matches!(
            read_tensor_as::<f64>(&path),
            Err(Error::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = encode(&Tensor::<f64>::ones(&[2, 2]));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_truncation_by_one_byte() {
        let b = encode(&Tensor::<f64>::ones(&[2, 3]));
        assert!(matches!(
            decode(&b[..b.len() - 1]),
            Err(Error::TruncatedPayload { expected, actual }) if expected == actual + 1
        ));
    }

    #[test]
    fn rejects_unknown_version_and_dtype() {
        let mut b = encode(&Tensor::<f32>::ones(&[1]));
        b[4] = 2;
        assert!(matches!(decode(&b), Err(Error::UnsupportedVersion(2))));
        let mut b = encode(&Tensor::<f32>::ones(&[1]));
        b[8] = 7;
        assert!(matches!(decode(&b), Err(Error::UnsupportedDtype(7))));
    }

    #[test]
    fn header_only_read_matches_and_checks_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.hstn");
        write_tensor(&Tensor::<f64>::ones(&[4, 2, 3]), &path).unwrap();
        assert_eq!(read_header(&path).unwrap(), (DType::F64, vec![4, 2, 3]));
        let b = fs::read(&path).unwrap();
        fs::write(&path, &b[..b.len() - 8]).unwrap();
        assert!(matches!(read_header(&path), Err(Error::TruncatedPayload { .. })));
        let mut long = b.clone();
        long.push(0);
        fs::write(&path, &long).unwrap();
        assert!(read_header(&path).is_err());
        assert!(decode(&long).is_err());
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=5)
    }

    proptest! {
        #[test]
        fn round_trip_any_rank_and_dtype(dims in dims_strategy(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f32>::uniform(&dims, -1e6, 1e6, &mut rng);
            let b = Tensor::<f64>::uniform(&dims, -1e-6, 1e-6, &mut rng);
            prop_assert_eq!(decode(&encode(&a)).unwrap(), AnyTensor::F32(a.clone()));
            prop_assert_eq!(decode(&encode(&b)).unwrap(), AnyTensor::F64(b.clone()));
        }
    }
}
