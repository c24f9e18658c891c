//! Dense row-major tensors carrying weights and calibration activations.
//!
//! Elements keep their storage dtype so that f16 payloads round-trip bit
//! exactly; all arithmetic happens on an f32 view.

use half::f16;
use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        })
    }
}

/// Element buffer in its storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
        }
    }
}

/// A dense row-major tensor whose elements are all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorF {
    /// Builds a tensor, checking rank, element count and finiteness.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor rank must be at least 1".into()));
        }
        if let Some(d) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("dimension {d} has size 0")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("element count of {shape:?} overflows")))?;
        if count != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {count} elements, buffer has {}",
                data.len()
            )));
        }
        let t = TensorF { shape, data };
        if let Some(index) = t.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self> {
        Self::new(shape, TensorData::F16(data))
    }

    /// Wraps a matrix as an f32 tensor.
    pub fn from_matrix(m: &Array2<f32>) -> Result<Self> {
        let shape = m.shape().to_vec();
        Self::from_f32(shape, m.iter().copied().collect())
    }

    /// Wraps a matrix, rounding to the requested storage dtype.
    pub fn from_matrix_as(m: &Array2<f32>, dtype: DType) -> Result<Self> {
        let shape = m.shape().to_vec();
        match dtype {
            DType::F32 => Self::from_matrix(m),
            DType::F16 => Self::from_f16(shape, m.iter().map(|&v| f16::from_f32(v)).collect()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Elements widened to f32. Exact for both dtypes.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }

    /// The tensor as an f32 matrix; fails unless the rank is 2.
    pub fn to_matrix(&self) -> Result<Array2<f32>> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(
            Array2::from_shape_vec((self.shape[0], self.shape[1]), self.to_f32_vec())
                .expect("shape checked at construction"),
        )
    }

    fn first_non_finite(&self) -> Option<usize> {
        match &self.data {
            TensorData::F32(v) => v.iter().position(|x| !x.is_finite()),
            TensorData::F16(v) => v.iter().position(|x| !x.is_finite()),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &TensorF) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F16(a), TensorData::F16(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_zero() {
        assert!(matches!(
            TensorF::from_f32(vec![], vec![]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rejects_count_mismatch() {
        assert!(TensorF::from_f32(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite_with_index() {
        let err = TensorF::from_f32(vec![3], vec![0.0, 1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2 }));
        let err = TensorF::from_f16(vec![2], vec![f16::INFINITY, f16::ZERO]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0 }));
    }

    #[test]
    fn f16_widening_is_exact() {
        let vals = [
            f16::from_f32(0.1),
            f16::from_f32(-3.5),
            f16::MAX,
            f16::MIN_POSITIVE,
        ];
        let t = TensorF::from_f16(vec![4], vals.to_vec()).unwrap();
        for (w, v) in t.to_f32_vec().iter().zip(vals) {
            assert_eq!(f16::from_f32(*w).to_bits(), v.to_bits());
        }
    }
}
