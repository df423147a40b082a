use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len().max(1) as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return shape_err(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// Bitwise equality of shape and data, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// Matrix product `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_ex(&self, ta: bool, other: &Self, tb: bool) -> Result<Self> {
        super::kernels::matmul(self, ta, other, tb)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_ex(false, other, false)
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}
