//! n-dimensional tensors and the reverse-mode differentiation tape.

mod gradcheck;
mod tape;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_against, finite_diff_check_floored, gradcheck_suite,
    OpCheck,
};
pub use tape::{Tape, Var, LOG_FLOOR};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense tensor of 32-bit reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
    trainable: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            trainable: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
            trainable: false,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; numel],
            grad: None,
            trainable: false,
        }
    }

    /// He-uniform init: U(-l, l) with l = sqrt(6 / fan_in). Used ahead of ReLU.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / fan_in as f32).sqrt();
        Self::uniform_init(shape, limit, rng)
    }

    /// Glorot-uniform init: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Self::uniform_init(shape, limit, rng)
    }

    fn uniform_init(shape: &[usize], limit: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.uniform(-limit, limit)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            trainable: false,
        }
    }

    /// N(0, std) init, used for embedding tables.
    pub fn normal(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.normal(0.0, std)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            trainable: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<f32>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "value buffer length {} does not match shape {:?}",
                values.len(),
                self.shape
            )));
        }
        self.values = values;
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Add a gradient contribution, allocating the buffer on first use.
    pub fn accumulate_grad(&mut self, contribution: &[f32]) {
        debug_assert_eq!(contribution.len(), self.values.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => self.grad = Some(contribution.to_vec()),
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

    pub fn assert_finite(&self, label: &str) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite value in {label}")));
        }
        if let Some(g) = &self.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("non-finite gradient in {label}")));
            }
        }
        Ok(())
    }
}
