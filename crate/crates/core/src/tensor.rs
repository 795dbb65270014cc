//! Dense row-major tensors over f64.
//!
//! Everything downstream (the tape, the model, the optimizer) works on these.
//! Double precision is used throughout so that finite-difference gradient
//! checks are meaningful.

use thiserror::Error;

/// Errors raised by the tensor/tape kernel.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("rank error in {op}: expected {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("numerics error in {op}: {detail}")]
    Numerics { op: &'static str, detail: String },
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, KernelError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(KernelError::Rank {
                op: "tensor",
                expected: "non-empty shape with positive extents",
                shape,
            });
        }
        if numel_of(&shape) != data.len() {
            return Err(KernelError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extent of the last axis; the "row length" for row-wise ops.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn as_scalar(&self) -> Result<f64, KernelError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(KernelError::Rank {
                op: "as_scalar",
                expected: "single-element tensor",
                shape: self.shape.clone(),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
