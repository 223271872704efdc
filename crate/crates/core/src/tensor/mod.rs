//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable row-major value. [`Tape`] records every
//! operation applied to tensors it owns and can replay the graph in
//! reverse to produce gradients. The op set is exactly what the encoder,
//! decoder, and velocity networks need: matrix products, row broadcasts,
//! fused softmax / layer norm / GELU, column slicing for attention heads,
//! and full reductions for losses.
//!
//! Gradients of every op are validated against central differences; see
//! [`check::finite_diff_check`].

mod check;
mod tape;

pub use check::finite_diff_check;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use std::sync::Arc;

/// Immutable dense tensor, row-major, `f64` throughout.
///
/// Cloning is cheap (the buffer is shared). All arithmetic lives on
/// [`Tape`]; a bare `Tensor` is just data.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build from a shape and matching buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.is_empty() || expect != data.len() {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!("shape {shape:?} needs {expect} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    /// Single-element tensor holding `x`.
    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![x]),
        }
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim(
                "Tensor::item",
                format!("expected 1 element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Interpret as a matrix: `[n]` counts as one row, `[r, c]` as is.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::dim(
                "Tensor::dims2",
                format!("expected rank <= 2, shape is {:?}", self.shape),
            )),
        }
    }

    /// Element at `(row, col)` under the [`dims2`](Self::dims2) view.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.dims2().expect("at2 on rank > 2 tensor");
        self.data[row * c + col]
    }

    /// True when buffers are bitwise identical (shape and every element).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

}
