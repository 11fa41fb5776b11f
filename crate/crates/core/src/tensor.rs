//! Dense row-major tensors and the `.tns` wire encoding used by the
//! subprocess engine protocol.
//!
//! File layout: magic `GFTZ`, version `u8 = 1`, dtype `u8` (0 = f32,
//! 1 = i32, 2 = i8), rank `u8`, dims as little-endian `u32`, then raw
//! element data little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "i32")]
    I32,
    #[serde(rename = "i8")]
    I8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
            DType::I8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I32),
            2 => Some(DType::I8),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<DType> {
        match name {
            "f32" => Some(DType::F32),
            "i32" => Some(DType::I32),
            "i8" => Some(DType::I8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I32 => "i32",
            DType::I8 => "i8",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    I8(Vec<i8>),
}

/// NaN and Inf are ordinary element values here; nothing in the pipeline
/// replaces them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<i64>,
    pub data: TensorData,
}

pub fn numel(shape: &[i64]) -> usize {
    shape.iter().product::<i64>().max(0) as usize
}

/// Row-major strides.
pub fn strides(shape: &[i64]) -> Vec<usize> {
    let mut out = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        out[d] = out[d + 1] * shape[d + 1] as usize;
    }
    out
}

impl Tensor {
    pub fn zeros(shape: &[i64], dtype: DType) -> Tensor {
        let n = numel(shape);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::I32 => TensorData::I32(vec![0; n]),
            DType::I8 => TensorData::I8(vec![0; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[i64], data: Vec<f32>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "data length mismatch");
        Tensor {
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match &self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Element at a flat index widened to f64, whatever the dtype.
    pub fn value_at(&self, idx: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => v[idx] as f64,
            TensorData::I32(v) => v[idx] as f64,
            TensorData::I8(v) => v[idx] as f64,
        }
    }

    pub fn offset(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.shape.len());
        let strides = strides(&self.shape);
        coords
            .iter()
            .zip(strides)
            .map(|(&c, s)| c as usize * s)
            .sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TnsError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDType(u8),
    #[error("rank {0} out of range")]
    BadRank(u8),
}

const MAGIC: &[u8; 4] = b"GFTZ";
const VERSION: u8 = 1;
const MAX_RANK: u8 = 8;

pub fn write_tns(tensor: &Tensor, w: &mut impl Write) -> Result<(), TnsError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, tensor.dtype().code(), tensor.shape.len() as u8])?;
    for &dim in &tensor.shape {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    match &tensor.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::I32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::I8(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tns(r: &mut impl Read) -> Result<Tensor, TnsError> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TnsError::BadMagic);
    }
    if head[4] != VERSION {
        return Err(TnsError::BadVersion(head[4]));
    }
    let dtype = DType::from_code(head[5]).ok_or(TnsError::BadDType(head[5]))?;
    let rank = head[6];
    if rank > MAX_RANK {
        return Err(TnsError::BadRank(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)?;
        shape.push(u32::from_le_bytes(dim) as i64);
    }
    let n = numel(&shape);
    let data = match dtype {
        DType::F32 => {
            let mut v = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                v.push(f32::from_le_bytes(buf));
            }
            TensorData::F32(v)
        }
        DType::I32 => {
            let mut v = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                v.push(i32::from_le_bytes(buf));
            }
            TensorData::I32(v)
        }
        DType::I8 => {
            let mut v = Vec::with_capacity(n);
            let mut buf = [0u8; 1];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                v.push(buf[0] as i8);
            }
            TensorData::I8(v)
        }
    };
    Ok(Tensor { shape, data })
}

pub fn write_tns_file(tensor: &Tensor, path: &std::path::Path) -> Result<(), TnsError> {
    let mut buf = Vec::new();
    write_tns(tensor, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tns_file(path: &std::path::Path) -> Result<Tensor, TnsError> {
    let bytes = std::fs::read(path)?;
    read_tns(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tns_round_trip_all_dtypes() {
        let tensors = [
            Tensor::from_f32(&[1, 2, 2, 1], vec![1.0, -2.5, f32::NAN, f32::INFINITY]),
            Tensor {
                shape: vec![3],
                data: TensorData::I32(vec![-7, 0, 123456]),
            },
            Tensor {
                shape: vec![2, 2],
                data: TensorData::I8(vec![-128, -1, 0, 127]),
            },
        ];
        for t in &tensors {
            let mut buf = Vec::new();
            write_tns(t, &mut buf).unwrap();
            let back = read_tns(&mut buf.as_slice()).unwrap();
            assert_eq!(back.shape, t.shape);
            assert_eq!(back.dtype(), t.dtype());
            // NaN != NaN, so compare bit patterns through a re-encode.
            let mut buf2 = Vec::new();
            write_tns(&back, &mut buf2).unwrap();
            assert_eq!(buf, buf2);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = Vec::new();
        write_tns(&Tensor::zeros(&[1], DType::F32), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_tns(&mut buf.as_slice()),
            Err(TnsError::BadMagic)
        ));
    }

    #[test]
    fn truncated_stream_rejected() {
        let mut buf = Vec::new();
        write_tns(&Tensor::zeros(&[2, 2], DType::I32), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tns(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[1, 8, 8, 3]), vec![192, 24, 3, 1]);
        let t = Tensor::zeros(&[1, 4, 4, 2], DType::F32);
        assert_eq!(t.offset(&[0, 1, 2, 1]), 8 + 4 + 1);
    }
}
