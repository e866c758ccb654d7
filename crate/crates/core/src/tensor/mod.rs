//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The [`Tensor`] type is plain storage (shape + flat values + optional
//! gradient buffer). All differentiable computation happens on a [`Tape`],
//! which records operations during the forward pass and replays them in
//! reverse to accumulate gradients. [`gradcheck`] provides the
//! central-difference oracle used throughout the test suites.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, SimpleStore};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankError {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense n-dimensional array of f64 with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            n,
            values.len(),
            "shape {shape:?} implies {n} values, got {}",
            values.len()
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![v; n])
    }

    /// Marks the tensor as trainable. Gradients accumulate into `grad`.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Glorot-style uniform init in +-sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
        Tensor::new(shape, values).with_grad()
    }

    /// Normal init with the given standard deviation (embedding tables).
    pub fn normal_init(shape: Vec<usize>, sigma: f64, rng: &mut crate::rng::Rng) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.normal() * sigma).collect();
        Tensor::new(shape, values).with_grad()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
