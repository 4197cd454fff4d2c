//! `.ten` binary array files.
//!
//! Layout: magic `TEN1`, one dtype byte (1 = f32, 2 = f64, 3 = u8), one rank
//! byte, `rank` little-endian u32 extents, then the row-major little-endian
//! payload.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TEN1";

#[derive(Clone, Debug, PartialEq)]
pub enum TenData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

/// An untyped array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TenArray {
    pub shape: Vec<usize>,
    pub data: TenData,
}

impl TenArray {
    pub fn dtype(&self) -> DType {
        match self.data {
            TenData::F32(_) => DType::F32,
            TenData::F64(_) => DType::F64,
            TenData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TenData::F32(v) => v.len(),
            TenData::F64(v) => v.len(),
            TenData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        Self::from_values(t.shape().to_vec(), t.data())
    }

    /// Store `values` with `T`'s native dtype.
    pub fn from_values<T: Real>(shape: Vec<usize>, values: &[T]) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TenData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            _ => TenData::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Self { shape, data }
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Self {
        Self {
            shape,
            data: TenData::U8(values),
        }
    }

    /// Values converted to `T`; u8 payloads are returned as their integer value.
    pub fn to_values<T: Real>(&self) -> Vec<T> {
        match &self.data {
            TenData::F32(v) => v.iter().map(|x| T::of(*x as f64)).collect(),
            TenData::F64(v) => v.iter().map(|x| T::of(*x)).collect(),
            TenData::U8(v) => v.iter().map(|x| T::of(*x as f64)).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.to_values())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(TensorError::Format("rank exceeds 255".into()));
        }
        let n: usize = self.shape.iter().product();
        if n != self.len() {
            return Err(TensorError::Format(format!(
                "shape {:?} holds {n} values, payload has {}",
                self.shape,
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + n * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TenData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TenData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TenData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Format(m.to_string());
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("missing TEN1 magic"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let s = 6 + 4 * i;
                u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n * dtype.size() {
            return Err(bad("payload length does not match shape"));
        }
        let data = match dtype {
            DType::F32 => TenData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TenData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TenData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
