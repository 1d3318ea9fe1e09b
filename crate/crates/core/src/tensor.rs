//! `ALTENS01` flat tensor files: the carrier for probability maps and
//! embeddings exchanged with external learners.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   8 bytes   "ALTENS01"
//! ndim    u32
//! dims    ndim × u64
//! payload product(dims) × f32, row-major
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ALTENS01";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic: expected ALTENS01")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dims/payload mismatch: dims {dims:?} need {expected} payload bytes, found {found}")]
    DimsPayloadMismatch { dims: Vec<u64>, expected: u64, found: u64 },
    #[error("invalid dims {0:?}: every dimension must be positive")]
    InvalidDims(Vec<u64>),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl FlatTensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = element_count(&dims);
        if expected != data.len() as u64 {
            return Err(TensorError::DimsPayloadMismatch {
                expected: expected * 4,
                found: data.len() as u64 * 4,
                dims,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of the tensor viewed as `dims[0]` rows.
    pub fn row(&self, i: usize) -> &[f32] {
        let stride = self.data.len() / self.dims[0] as usize;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let header_short = |need: usize| TensorError::Truncated {
            expected: need as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 12 {
            return Err(header_short(12));
        }
        let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_len = 12 + 8 * ndim;
        if bytes.len() < header_len {
            return Err(header_short(header_len));
        }
        let dims: Vec<u64> = bytes[12..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload = &bytes[header_len..];
        let expected = element_count(&dims).saturating_mul(4);
        let found = payload.len() as u64;
        if found < expected {
            return Err(TensorError::Truncated { expected, found });
        }
        if found != expected {
            return Err(TensorError::DimsPayloadMismatch { dims, expected, found });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

fn element_count(dims: &[u64]) -> u64 {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).unwrap_or(u64::MAX)
}

pub fn write_tensor(tensor: &FlatTensor, path: &Path) -> Result<(), TensorError> {
    if tensor.dims.is_empty() || tensor.dims.contains(&0) {
        return Err(TensorError::InvalidDims(tensor.dims.clone()));
    }
    let io_err = |source| TensorError::Io { path: path.display().to_string(), source };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&tensor.to_bytes()).map_err(io_err)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<FlatTensor, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FlatTensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_2x3_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let t = FlatTensor::new(vec![2, 3], vec![0.0, -1.5, 3.25, f32::MIN_POSITIVE, 1e-7, 0.9999999]).unwrap();
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims, vec![2, 3]);
        for (a, b) in t.data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = FlatTensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[..2].copy_from_slice(b"XX");
        let err = FlatTensor::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn zero_dim_with_payload_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let err = FlatTensor::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("dims/payload mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = FlatTensor::new(vec![4], vec![1.0; 4]).unwrap().to_bytes();
        let err = FlatTensor::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, TensorError::Truncated { .. }));
        let err = FlatTensor::from_bytes(&bytes[..14]).unwrap_err();
        assert!(matches!(err, TensorError::Truncated { .. }));
    }

    #[test]
    fn write_rejects_zero_dims() {
        let dir = tempfile::tempdir().unwrap();
        let t = FlatTensor { dims: vec![0], data: vec![] };
        assert!(matches!(write_tensor(&t, &dir.path().join("z")), Err(TensorError::InvalidDims(_))));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = FlatTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().to_bytes();
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..28], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    proptest! {
        #[test]
        fn finite_values_roundtrip_bit_exact(
            rows in 1u64..5,
            vals in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO, 1..40),
        ) {
            let cols = vals.len() as u64;
            let data: Vec<f32> = (0..rows).flat_map(|_| vals.iter().copied()).collect();
            let t = FlatTensor::new(vec![rows, cols], data).unwrap();
            let back = FlatTensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(&back.dims, &t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
