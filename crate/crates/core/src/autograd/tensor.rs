//! Dense f64 tensor with optional gradient storage.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64 values in row-major order.
///
/// A tensor with `requires_grad` set participates in reverse-mode
/// differentiation; its `grad` buffer is populated by [`Graph::backward`]
/// (accumulating additively across uses and across backward passes through
/// separate graphs).
///
/// [`Graph::backward`]: super::Graph::backward
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D constructor: `rows × cols` from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count for a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for a 2-D tensor (or length of a 1-D tensor).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// A tensor with `requires_grad == false` never receives a grad.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
