//! Dense tensors and the reverse-mode tape.
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer; it never aliases.
//! Differentiable computation happens on a [`Tape`]: values are pushed as
//! leaves, operations append nodes, and `backward` walks the node list in
//! reverse filling per-node gradient buffers.  The tape is rebuilt every
//! training step, which keeps op implementations free of lifetime puzzles and
//! makes memory use proportional to one batch.

mod conv;
mod dense;
pub mod grad_check;
mod matmul;
mod norm;
mod pool;
mod softmax;
mod tape;

pub use grad_check::{grad_check, grad_check_sampled, GradCheckReport};
pub use tape::{Tape, TensorId};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of elements implied by a shape.  The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major tensor.
///
/// `requires_grad` marks the tensor as a trainable quantity: when it is pushed
/// onto a tape as a leaf, `backward` will produce a gradient for it, and the
/// training loop copies that gradient back into `grad` here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                alloc::format!(
                    "shape {:?} implies {} elements but buffer has {}",
                    shape,
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builder-style toggle used when declaring parameters.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        if !yes {
            self.grad = None;
        }
        self
    }

    pub fn tracks_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::invalid(
                "set_grad",
                alloc::format!(
                    "gradient has {} elements, tensor has {}",
                    grad.len(),
                    self.data.len()
                ),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interpret as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::invalid(
                "dims4",
                alloc::format!("expected rank 4, got shape {:?}", other),
            )),
        }
    }

    /// Interpret as `[N, D]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[n, d] => Ok((n, d)),
            other => Err(Error::invalid(
                "dims2",
                alloc::format!("expected rank 2, got shape {:?}", other),
            )),
        }
    }
}
