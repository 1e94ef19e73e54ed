//! Dense row-major `f64` tensors.
//!
//! Sample tensors are laid out spatial-major with the channel axis last
//! (fastest varying). Batched tensors add a leading batch axis.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("tensor shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("tensor shape must have at least one axis")]
    Scalar,
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::Scalar);
    }
    if shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics if `shape` has no axes or a zero extent.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::Reshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<'a>(items: impl IntoIterator<Item = &'a Tensor>) -> Result<Self, TensorError> {
        let mut shape: Option<Vec<usize>> = None;
        let mut data = Vec::new();
        let mut count = 0;
        for t in items {
            match &shape {
                None => shape = Some(t.shape.clone()),
                Some(s) if s != &t.shape => {
                    return Err(TensorError::Reshape {
                        from: t.shape.clone(),
                        to: s.clone(),
                    })
                }
                _ => {}
            }
            data.extend_from_slice(&t.data);
            count += 1;
        }
        let mut full = vec![count];
        full.extend(shape.unwrap_or_default());
        Tensor::new(full, data)
    }

    /// Copies rows `start..end` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.shape[0], "row range out of bounds");
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

/// FNV-1a over the bit patterns of a sequence of values.
pub fn checksum<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(Tensor::new(vec![], vec![]), Err(TensorError::Scalar));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroExtent(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { expected: 4, .. })
        ));
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack([&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_rows(1, 2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn checksum_sees_sign_of_zero() {
        assert_ne!(checksum(&[0.0]), checksum(&[-0.0]));
    }
}
