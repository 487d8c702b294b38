//! Minimal reverse-mode differentiation for the U-Net layer set.
//!
//! Only the operations the segmenter needs exist: 2-D convolution, ReLU,
//! 2×2 max-pooling, nearest-neighbour upsampling, centre-crop concatenation,
//! pixel-wise softmax and the weighted cross-entropy. Tensors carry no batch
//! axis; a batch is a set of independent tapes.

mod conv;
mod init;
mod scalar;
mod sgd;
mod tape;

pub use conv::{conv_output_len, Padding};
pub use init::{gaussian_init, he_std};
pub use scalar::Scalar;
pub use sgd::SgdState;
pub use tape::{softmax_px, Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            dims,
            values,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            values: vec![T::ZERO; n],
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![],
            values: vec![v],
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape("gradient length differs from tensor length".into()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// `(channels, height, width)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.dims {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected [C,H,W], got {:?}", self.dims))),
        }
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    /// Converts element type, e.g. f32 parameters into an f64 checking copy.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }
}
