//! Dense row-major f32 tensors and labeled minibatches.

use crate::error::{Error, Result};

/// A dense tensor: row-major f32 values plus an optional gradient buffer of
/// identical length. Scalars use the empty shape `[]` (numel 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::shape(
                "tensor",
                "values",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", values.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.is_empty()
    }

    /// Add `delta` elementwise into the gradient buffer, allocating it at
    /// zero if absent.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Error if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        check_finite(&self.values, context)
    }
}

pub fn check_finite(values: &[f32], context: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{context} (element {i} = {v})"),
            });
        }
    }
    Ok(())
}

/// A batch of image inputs with integer class labels.
#[derive(Debug, Clone)]
pub struct Minibatch {
    /// Inputs of shape `[batch, channels, height, width]`.
    pub inputs: Tensor,
    pub labels: Vec<u32>,
    pub batch_size: usize,
}

impl Minibatch {
    pub fn new(inputs: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if inputs.shape.len() != 4 {
            return Err(Error::shape(
                "minibatch",
                "inputs",
                "[batch, channels, height, width]",
                format!("{:?}", inputs.shape),
            ));
        }
        let batch = inputs.shape[0];
        if labels.len() != batch {
            return Err(Error::shape(
                "minibatch",
                "labels",
                format!("{batch} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Minibatch {
            inputs,
            labels,
            batch_size: batch,
        })
    }

    pub fn resolution(&self) -> usize {
        self.inputs.shape[2]
    }
}
