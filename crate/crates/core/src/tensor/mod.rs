//! Dense f64 tensors with a per-forward reverse-mode tape.
//!
//! Values are stored flat in row-major order. The [`Graph`] records a tape of
//! matrix operations; [`Graph::backward`] consumes it and accumulates
//! gradients into the [`ParamSet`] that supplied the trainable leaves.

pub(crate) mod checkpoint;
mod graph;
mod optim;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, InputGrads, Var};
pub(crate) use graph::gemm;
pub use optim::{clip_grad_norm, opt_step, Optimizer, OptimizerKind};
pub use params::{ema_update, EmaParamSet, ParamId, ParamSet};

use crate::error::{check_finite, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        check_finite("tensor", &values)?;
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(shape_err(
                "accumulate_grad",
                format!("grad len {} vs tensor len {}", g.len(), self.values.len()),
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Rows and columns when viewed as a matrix; rank-1 tensors are row vectors.
    pub fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidArgument(format!(
                "expected rank 1 or 2 tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
