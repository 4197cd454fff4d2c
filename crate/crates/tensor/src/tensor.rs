use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{finite_checks_enabled, Gradients, NodeRef, Tape};

/// Dense row-major tensor, optionally recorded on a [`Tape`].
///
/// Values are immutable and shared; cloning a tensor is cheap.
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<NodeRef<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    if numel_of(shape) != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("expected {} values, got {len}", numel_of(shape)),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn from_slice(shape: &[usize], data: &[T]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = numel_of(&shape);
        Self {
            shape,
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<Tape<T>> {
        self.node.as_ref().map(|n| n.tape.clone())
    }

    /// Same values, cut from the tape. Gradients never flow through the result.
    pub fn detach(&self) -> Self {
        self.with_node(None)
    }

    /// Alias of [`Tensor::detach`] named after its role in loss construction.
    pub fn stop_gradient(&self) -> Self {
        self.detach()
    }

    pub(crate) fn with_node(&self, node: Option<NodeRef<T>>) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node,
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.as_f64())).collect()),
            node: None,
        }
    }

    /// Reverse-mode accumulation from this scalar. Consumes the tape.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        let node = self.node.as_ref().ok_or(TensorError::EmptyTape)?;
        node.tape.backward_from(node)
    }

    /// Record a custom differentiable op.
    ///
    /// `backward` receives the upstream gradient (same length as `data`) and
    /// one flag per input telling whether that input needs a gradient; it
    /// returns one optional gradient per input, each the length of that input.
    /// When no input is attached the result is detached and `backward` is dropped.
    pub fn from_op<F>(
        op: &'static str,
        inputs: &[&Tensor<T>],
        shape: Vec<usize>,
        data: Vec<T>,
        backward: F,
    ) -> Result<Tensor<T>>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        validate_shape(&shape, data.len())?;
        if finite_checks_enabled() && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        let mut tape: Option<Tape<T>> = None;
        for input in inputs {
            if let Some(node) = &input.node {
                match &tape {
                    None => {
                        node.tape.check_current(node)?;
                        tape = Some(node.tape.clone());
                    }
                    Some(t) => {
                        if !t.same_as(&node.tape) {
                            return Err(TensorError::TapeMismatch);
                        }
                        t.check_current(node)?;
                    }
                }
            }
        }
        let node = tape.map(|t| {
            let parents = inputs
                .iter()
                .map(|i| i.node.as_ref().map(|n| n.id))
                .collect();
            t.push(parents, Some(Box::new(backward)))
        });
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node,
        })
    }
}
