//! Dense row-major tensors, the forward kernels LeViT needs, and a
//! reverse-mode tape for gradient verification at desk scale.
//!
//! Image activations use BCHW ordering throughout; attention reshapes them to
//! `(batch, heads, dim, tokens)` without copying.

mod element;
pub mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use element::{DType, Element, MatView};
pub use tape::{Gradients, Tape, Var};

use crate::error::{LevitError, Result};

/// Dense N-dimensional array. Storage is shared, so clones are cheap and
/// mutation goes through copy-on-write.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LevitError::shape("Tensor::new", format!("{numel} elements for shape {shape:?}"), data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a tensor from its flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new((0..numel).map(f).collect()) }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(LevitError::shape("item", "one element", format!("{:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(LevitError::shape("reshape", format!("{} elements", self.numel()), format!("{shape:?}")));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    /// Four leading extents of a BCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(LevitError::shape("dims4", "BCHW tensor", format!("{:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(LevitError::shape(op, format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect()),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: E) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(other.data.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max))
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| F::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} [", E::DTYPE.name(), self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `HxW`-style rendering used in reports.
pub fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.reshape(&[4, 2]).is_err());
        assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn clones_are_copy_on_write() {
        let a = Tensor::<f64>::zeros(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(b.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cast_roundtrips_representable_values() {
        let a = Tensor::<f32>::from_f64(&[2], &[0.5, -2.25]).unwrap();
        let b: Tensor<f64> = a.cast();
        assert_eq!(b.data(), &[0.5, -2.25]);
    }
}
