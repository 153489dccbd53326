//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! Everything is 64-bit and row-major. The tape ([`Tape`]) records primitive
//! ops during the forward pass and replays them in reverse; gradients are
//! checked against central finite differences (see [`check`]).

mod gemm;
mod tape;

pub mod check;

pub use tape::{Gradients, NodeId, Op, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension sizes must be positive, got {shape:?}")]
    ZeroDim { shape: Vec<usize> },
    #[error("matmul dimension mismatch: left {left:?} vs right {right:?}")]
    MatmulMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("shapes {left:?} and {right:?} are not broadcast-compatible")]
    BroadcastMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { shape: Vec<usize> },
    #[error("reshape from {from:?} to {to:?} changes element count")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) exceeds last axis of {shape:?}")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("concat inputs disagree on leading shape: {left:?} vs {right:?}")]
    ConcatMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("layernorm parameter shape {param:?} does not match last axis of {shape:?}")]
    LayerNormParam { param: Vec<usize>, shape: Vec<usize> },
    #[error("expected scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("finite-difference step must be in (0, 1e-3], got {0}")]
    BadStep(f64),
    #[error("backward target must be a scalar with requires_grad ancestry")]
    NoGradPath,
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                actual: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Trailing-dimension broadcast: shapes are right-aligned and each pair of
/// dims must be equal or 1. Anything fancier is rejected.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::BroadcastMismatch {
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Map a flat index in `out_shape` to the flat index in `in_shape`
/// (right-aligned, size-1 dims repeat).
pub(crate) fn broadcast_index(
    flat: usize,
    out_shape: &[usize],
    out_strides: &[usize],
    in_shape: &[usize],
    in_strides: &[usize],
) -> usize {
    let offset = out_shape.len() - in_shape.len();
    let mut idx = 0usize;
    for (i, (&dim, &stride)) in out_shape.iter().zip(out_strides).enumerate() {
        let coord = (flat / stride) % dim;
        if i >= offset {
            let j = i - offset;
            if in_shape[j] != 1 {
                idx += coord * in_strides[j];
            }
        }
    }
    idx
}

/// Sum `grad` (shaped `out_shape`) down to `in_shape` by adding over
/// broadcast axes. Inverse of broadcasting in the backward pass.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let out_strides = strides_of(out_shape);
    let in_strides = strides_of(in_shape);
    let n_in: usize = in_shape.iter().product();
    let mut out = vec![0.0; n_in];
    for (flat, &g) in grad.iter().enumerate() {
        let idx = broadcast_index(flat, out_shape, &out_strides, in_shape, &in_strides);
        out[idx] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn new_rejects_zero_dims() {
        let err = Tensor::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroDim { .. }));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3], &[1]).unwrap(), vec![3]);
        assert_eq!(broadcast_shape(&[12, 256], &[256]).unwrap(), vec![12, 256]);
        assert_eq!(broadcast_shape(&[12, 256], &[1, 256]).unwrap(), vec![12, 256]);
        assert!(broadcast_shape(&[3], &[2]).is_err());
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        // (2,3) reduced to (3,) sums rows; to (1,) sums all
        let g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[1]), vec![21.0]);
    }
}
