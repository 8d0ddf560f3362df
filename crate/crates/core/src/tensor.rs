//! Dense row-major tensors.
//!
//! [`Tensor`] is the plain value type: parameters live in it between steps,
//! and every node on the computation tape owns one. A tensor that sits on a
//! tape carries `node: Some(index)`; free-standing storage has `node: None`.

use crate::rng::StreamRng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    /// Row-major values; `values.len() == shape.iter().product()`.
    pub values: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by the backward pass, same shape as `values`.
    /// Never allocated when `requires_grad` is false.
    pub grad: Option<Vec<f64>>,
    /// Index of this tensor's node when it lives on a tape.
    pub node: Option<usize>,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Self {
        assert_eq!(
            values.len(),
            numel(&shape),
            "tensor values ({}) do not fill shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::new(vec![0.0; n], shape)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::new(vec![1.0; n], shape)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], vec![])
    }

    /// Gaussian init, the transformer convention for weight matrices.
    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut StreamRng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = numel(&shape);
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::new(values, shape)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The sole element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on non-scalar shape {:?}",
            self.shape
        );
        self.values[0]
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
