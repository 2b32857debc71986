//! Dense row-major tensors with FP16 or FP32 elements.

mod io;
mod ops;

pub use io::{read_named, read_table, write_named, write_table};
pub use ops::{
    add_row, binary, cast, concat_last, matmul_mixed, reduce, softmax, transpose2d, unary,
    BinaryOp, ReduceOp, UnaryOp,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halffloat::{f32_to_f16, F16};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F16,
    F32,
}

impl DType {
    /// Element width in bytes.
    pub const fn size_in_bytes(self) -> usize {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
        }
    }

    /// Wire/checkpoint tag: 0 = F16, 1 = F32.
    pub const fn tag(self) -> u8 {
        match self {
            DType::F16 => 0,
            DType::F32 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F16),
            1 => Ok(DType::F32),
            other => Err(Error::InvalidArgument(format!("unknown dtype tag {other}"))),
        }
    }

    /// F16 only when every participant is F16.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F16 && other == DType::F16 {
            DType::F16
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F16(Vec<F16>),
    F32(Vec<f32>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F16(v) => v.len(),
            Storage::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F16(_) => DType::F16,
            Storage::F32(_) => DType::F32,
        }
    }
}

/// An immutable dense tensor. `shape` product always equals the element count.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Storage) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, Storage::F32(data))
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<F16>) -> Result<Self> {
        Self::new(shape, Storage::F16(data))
    }

    /// Builds a tensor of `dtype` from FP32 values, rounding once when the
    /// target is F16.
    pub fn from_f32_as(shape: Vec<usize>, data: Vec<f32>, dtype: DType) -> Result<Self> {
        Self::new(shape, Storage::from_f32_values(data, dtype))
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = numel_of(&shape);
        let data = match dtype {
            DType::F16 => Storage::F16(vec![F16::ZERO; n]),
            DType::F32 => Storage::F32(vec![0.0; n]),
        };
        Self { shape, data }
    }

    pub fn full(shape: Vec<usize>, value: f32, dtype: DType) -> Self {
        let n = numel_of(&shape);
        Self {
            shape,
            data: Storage::from_f32_values(vec![value; n], dtype),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: Storage::F32(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn size_in_bytes(&self) -> usize {
        self.numel() * self.dtype().size_in_bytes()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Storage::F32(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[F16]> {
        match &self.data {
            Storage::F16(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    /// Exact FP32 view of the elements (widening F16).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
        }
    }

    pub fn get_f32(&self, index: usize) -> f32 {
        match &self.data {
            Storage::F32(v) => v[index],
            Storage::F16(v) => v[index].to_f32(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.get_f32(0))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast(&self, to: DType) -> Self {
        cast(self, to)
    }

    pub fn all_finite(&self) -> bool {
        match &self.data {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F16(v) => v.iter().all(|h| h.is_finite()),
        }
    }

    /// Raw little-endian element bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F16(v) => v.iter().flat_map(|h| h.to_bits().to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Result<Self> {
        let width = dtype.size_in_bytes();
        if bytes.len() != numel_of(&shape) * width {
            return Err(Error::shape(format!(
                "{} bytes cannot hold {:?} of {:?}",
                bytes.len(),
                shape,
                dtype
            )));
        }
        let data = match dtype {
            DType::F16 => Storage::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| F16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Self::new(shape, data)
    }

    /// Bitwise equality, including dtype and shape (NaN patterns compare equal).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype() == other.dtype()
            && self.to_le_bytes() == other.to_le_bytes()
    }
}

impl Storage {
    pub(crate) fn from_f32_values(values: Vec<f32>, dtype: DType) -> Self {
        match dtype {
            DType::F32 => Storage::F32(values),
            DType::F16 => Storage::F16(values.into_iter().map(f32_to_f16).collect()),
        }
    }
}
