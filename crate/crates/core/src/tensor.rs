//! Dense row-major N-d tensors over f32 (training) or f64 (gradient checking).

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar element type of the numeric pipeline.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && (self.shape.is_empty() || self.shape == [1])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.as_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|x| x.as_f64() as f32)
    }
}

/// He-normal initialization: i.i.d. N(0, 2 / fan_in).
pub fn he_normal_init<T: Element>(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("he_normal_init: fan_in must be positive".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of_f64(rng.normal() * std)).collect();
    Ok(Tensor { shape, data })
}
