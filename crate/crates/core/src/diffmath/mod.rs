//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Everything downstream (encoders, losses, attacks) differentiates through
//! this module, so the op set is deliberately small and every backward rule is
//! covered by central-difference checks in the test suite. Tensors are dense
//! row-major `f32` buffers; scalars have an empty shape.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, FiniteDiffReport, DEFAULT_FD_STEP};
pub use tape::{Gradients, Tape, VarId};

use thiserror::Error;

/// Norms below this are treated as degenerate (division would be unstable).
pub const NORM_EPSILON: f32 = 1e-12;

/// Errors raised by tensor construction, tape ops, and gradient checking.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("tensor: shape {shape:?} wants {want} values, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {want}, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        want: &'static str,
        got: Vec<usize>,
    },
    #[error("l2_normalize: row {row} has norm {norm:.3e}, below the {NORM_EPSILON:e} guard")]
    DegenerateNorm { row: usize, norm: f32 },
    #[error("softmax_cross_entropy: label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("set_max_pool: empty set (zero rows)")]
    EmptySet,
    #[error("{op}: index {index} out of range for {rows} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("backward: root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },
    #[error("finite_diff_check: function output must be a scalar, got shape {got:?}")]
    NonScalarOutput { got: Vec<usize> },
    #[error("finite_diff_check: non-finite evaluation at coordinate {coord} ({side})")]
    NonFiniteEvaluation { coord: usize, side: &'static str },
}

/// Dense row-major `f32` tensor. Rank 0 (empty shape) is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, DiffError> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(DiffError::ShapeDataMismatch {
                shape,
                want,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Rank-2 matrix from equal-length rows. An empty slice is rejected.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, DiffError> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a single-element tensor. Panics on anything larger: callers
    /// only use this on scalars produced by reduction ops.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` for rank-2 tensors.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor (or the whole buffer of a rank-1 tensor
    /// when `i == 0`).
    pub fn row(&self, i: usize) -> &[f32] {
        match self.shape.as_slice() {
            [r, c] => {
                assert!(i < *r);
                &self.data[i * c..(i + 1) * c]
            }
            [n] => {
                assert_eq!(i, 0);
                &self.data[..*n]
            }
            _ => panic!("row() on rank-0 tensor"),
        }
    }
}
