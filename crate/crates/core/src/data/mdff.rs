//! Flat binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `MDFF` |
//! | 4     | version (u32, currently 1) |
//! | 4     | rank (u32) |
//! | 4     | dtype code (u32): 0 = f32, 1 = f64 |
//! | 8 × rank | dims (u64) |
//! | rest  | row-major payload |

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MDFF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

fn element_count(dims: &[u64]) -> Result<usize> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::DimOverflow(dims.to_vec()))
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} describe {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_array2_f64(a: &Array2<f64>) -> Self {
        Tensor {
            dims: vec![a.nrows() as u64, a.ncols() as u64],
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn from_array3_f32(a: &Array3<f32>) -> Self {
        let (x, y, z) = a.dim();
        Tensor {
            dims: vec![x as u64, y as u64, z as u64],
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    pub fn into_array2_f64(self) -> Result<Array2<f64>> {
        match (self.dims.as_slice(), self.data) {
            (&[r, c], TensorData::F64(v)) => Array2::from_shape_vec((r as usize, c as usize), v)
                .map_err(|e| Error::Shape(e.to_string())),
            (dims, data) => Err(Error::Shape(format!(
                "expected a rank-2 f64 tensor, found rank {} {:?}",
                dims.len(),
                data.dtype()
            ))),
        }
    }

    pub fn into_array3_f32(self) -> Result<Array3<f32>> {
        match (self.dims.as_slice(), self.data) {
            (&[a, b, c], TensorData::F32(v)) => {
                Array3::from_shape_vec((a as usize, b as usize, c as usize), v)
                    .map_err(|e| Error::Shape(e.to_string()))
            }
            (dims, data) => Err(Error::Shape(format!(
                "expected a rank-3 f32 tensor, found rank {} {:?}",
                dims.len(),
                data.dtype()
            ))),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.dims.len() + self.data.len() * self.data.dtype().size()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.data.dtype() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            expected: expected as u64,
            found: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let rank = word(8) as usize;
        let dtype = DType::from_code(word(12))?;
        let dims_end = rank
            .checked_mul(8)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::DimOverflow(vec![rank as u64]))?;
        if bytes.len() < dims_end {
            return Err(truncated(dims_end));
        }
        let dims: Vec<u64> = (0..rank)
            .map(|k| {
                let at = HEADER_LEN + 8 * k;
                u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
            })
            .collect();
        let count = element_count(&dims)?;
        let total = count
            .checked_mul(dtype.size())
            .and_then(|n| n.checked_add(dims_end))
            .ok_or_else(|| Error::DimOverflow(dims.clone()))?;
        if bytes.len() < total {
            return Err(truncated(total));
        }
        if bytes.len() > total {
            return Err(Error::TrailingBytes((bytes.len() - total) as u64));
        }
        let payload = &bytes[dims_end..];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_arithmetic() {
        let t = Tensor::new(vec![2, 3], TensorData::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let bytes = t.encode();
        assert_eq!(bytes.len(), 56);
        assert_eq!(&bytes[..4], b"MDFF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::new(vec![2, 3], TensorData::F32(vec![0.5; 6])).unwrap();
        let good = t.encode();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad), Err(Error::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(Tensor::decode(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        let mut bad = good.clone();
        bad[12] = 7;
        assert!(matches!(Tensor::decode(&bad), Err(Error::UnsupportedDtype(7))));

        assert!(matches!(Tensor::decode(&good[..50]), Err(Error::Truncated { expected: 56, found: 50 })));
        assert!(matches!(Tensor::decode(&good[..10]), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Tensor::decode(&bad), Err(Error::DimOverflow(_))));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Tensor::decode(&long), Err(Error::TrailingBytes(1))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(0u64..5, 0..4),
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            let n: u64 = dims.iter().product();
            let bits = |i: u64| seed.wrapping_mul(6364136223846793005).wrapping_add(i.wrapping_mul(1442695040888963407));
            let data = if wide {
                TensorData::F64((0..n).map(|i| f64::from_bits(bits(i))).collect())
            } else {
                TensorData::F32((0..n).map(|i| f32::from_bits(bits(i) as u32)).collect())
            };
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.encode(), t.encode());
            prop_assert_eq!(back.dims, t.dims);
        }
    }
}
