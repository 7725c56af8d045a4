//! Dense row-major f32 tensors.
//!
//! Feature maps use the N×H×W×C layout; a tensor holds at most 4 dims.
//! Tensors are plain values: identity on an autodiff tape is handled by
//! the tape itself (see [`crate::tape`]).

use crate::error::{Error, Result};
use crate::rng::Pcg32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::shape("tensor extents must be positive"));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("filled: invalid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform init in ±bound.
    pub fn uniform(shape: Vec<usize>, bound: f32, rng: &mut Pcg32) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.range_f32(-bound, bound)).collect();
        Tensor::new(shape, data).expect("uniform: invalid shape")
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Single element of a scalar (shape [1]) tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
