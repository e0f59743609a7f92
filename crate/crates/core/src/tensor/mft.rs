//! The MFT1 binary tensor format.
//!
//! Layout: the magic `MFT1`, one dtype byte (0 = f32, 1 = f64), one byte of
//! rank, `rank` little-endian u32 extents, then the row-major little-endian
//! payload. Nothing follows the payload.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{DType, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MFT1";

#[derive(Debug, Error)]
pub enum MftError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"MFT1\"")]
    BadMagic(Vec<u8>),
    #[error("unknown dtype tag {0}")]
    BadDType(u8),
    #[error("dtype mismatch: file holds {found:?}, caller expected {expected:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    Trailing { expected: usize, actual: usize },
    #[error("expected rank {expected}, file holds shape {actual:?}")]
    Rank { expected: usize, actual: Vec<usize> },
    #[error(transparent)]
    Shape(#[from] TensorError),
}

/// A decoded tensor of either stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let rank = t.shape().len();
    assert!(rank <= u8::MAX as usize, "rank {rank} does not fit the header");
    let mut out = Vec::with_capacity(6 + 4 * rank + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(rank as u8);
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn need(bytes: &[u8], expected: usize) -> Result<(), MftError> {
    if bytes.len() < expected {
        return Err(MftError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn payload<T: Scalar>(shape: Vec<usize>, body: &[u8]) -> Result<Tensor<T>, MftError> {
    let data = body.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor, MftError> {
    need(bytes, 6)?;
    if &bytes[..4] != MAGIC {
        return Err(MftError::BadMagic(bytes[..4].to_vec()));
    }
    let dtype = DType::from_tag(bytes[4]).ok_or(MftError::BadDType(bytes[4]))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    need(bytes, header)?;
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + count * dtype.size();
    need(bytes, expected)?;
    if bytes.len() > expected {
        return Err(MftError::Trailing {
            expected,
            actual: bytes.len(),
        });
    }
    let body = &bytes[header..];
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(payload(shape, body)?),
        DType::F64 => AnyTensor::F64(payload(shape, body)?),
    })
}

fn expect_dtype<T: Scalar>(any: AnyTensor) -> Result<Tensor<T>, MftError> {
    let found = any.dtype();
    if found != T::DTYPE {
        return Err(MftError::DTypeMismatch {
            expected: T::DTYPE,
            found,
        });
    }
    // The dtype check above makes exactly one of these casts an identity.
    Ok(match any {
        AnyTensor::F32(t) => t.cast(),
        AnyTensor::F64(t) => t.cast(),
    })
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, MftError> {
    expect_dtype(decode_any(bytes)?)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<(), MftError> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|source| MftError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor, MftError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| MftError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_any(&bytes)
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>, MftError> {
    expect_dtype(read_any(path)?)
}

/// Reads a rank-3 feature map.
pub fn read_feature_map<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>, MftError> {
    let t = read::<T>(path)?;
    if t.shape().len() != 3 {
        return Err(MftError::Rank {
            expected: 3,
            actual: t.shape().to_vec(),
        });
    }
    Ok(t)
}
