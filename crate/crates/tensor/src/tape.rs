use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded op: receives the upstream gradient
/// and a per-parent flag telling which parents need a gradient.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

static FINITE_CHECKS: AtomicBool = AtomicBool::new(true);

/// Toggle NaN/Inf detection on every forward op. On by default.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

struct NodeRecord<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<NodeRecord<T>>,
    generation: u64,
}

/// Records differentiable operations in execution order.
///
/// A tape is consumed by [`Tensor::backward`]; tensors recorded before that
/// call become stale and can no longer take part in recorded ops.
pub struct Tape<T: Real> {
    inner: Arc<Mutex<TapeInner<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("generation", &inner.generation)
            .finish()
    }
}

/// Handle from a tensor into its tape.
#[derive(Clone)]
pub(crate) struct NodeRef<T: Real> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
    pub(crate) generation: u64,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Mutex::new(TapeInner {
                nodes: Vec::new(),
                generation: 0,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, TapeInner<T>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn same_as(&self, other: &Tape<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded nodes in the current generation.
    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.lock().generation
    }

    /// Drop every recorded node without computing gradients.
    pub fn reset(&self) {
        let mut inner = self.lock();
        inner.nodes.clear();
        inner.generation += 1;
    }

    /// Attach `value` as a gradient-receiving leaf. Data is shared, not copied.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let node = self.push(Vec::new(), None);
        value.with_node(Some(node))
    }

    pub(crate) fn push(
        &self,
        parents: Vec<Option<usize>>,
        backward: Option<BackwardFn<T>>,
    ) -> NodeRef<T> {
        let mut inner = self.lock();
        let id = inner.nodes.len();
        inner.nodes.push(NodeRecord { parents, backward });
        NodeRef {
            tape: self.clone(),
            id,
            generation: inner.generation,
        }
    }

    pub(crate) fn check_current(&self, node: &NodeRef<T>) -> Result<()> {
        if self.lock().generation != node.generation {
            return Err(TensorError::StaleTape);
        }
        Ok(())
    }

    /// Run reverse accumulation from `loss` and consume the tape.
    pub(crate) fn backward_from(&self, loss: &NodeRef<T>) -> Result<Gradients<T>> {
        let (nodes, generation) = {
            let mut inner = self.lock();
            if inner.generation != loss.generation {
                return Err(TensorError::StaleTape);
            }
            let nodes = std::mem::take(&mut inner.nodes);
            let generation = inner.generation;
            inner.generation += 1;
            (nodes, generation)
        };
        if nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let mut nodes = nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                nodes[id].backward = None;
                continue;
            };
            let record = &mut nodes[id];
            match record.backward.take() {
                None => {
                    leaves.insert(id, g);
                }
                Some(backward) => {
                    let needs: Vec<bool> = record.parents.iter().map(Option::is_some).collect();
                    let outs = backward(&g, &needs);
                    drop(backward);
                    for (parent, out) in record.parents.iter().zip(outs) {
                        let (Some(p), Some(out)) = (parent, out) else {
                            continue;
                        };
                        match &mut grads[*p] {
                            Some(acc) => {
                                for (a, o) in acc.iter_mut().zip(out.iter()) {
                                    *a += *o;
                                }
                            }
                            slot @ None => *slot = Some(out),
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.clone(),
            generation,
            grads: leaves,
        })
    }
}

/// Gradients of a scalar loss with respect to the leaves of a consumed tape.
pub struct Gradients<T: Real> {
    tape: Tape<T>,
    generation: u64,
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf created by [`Tape::leaf`]. Leaves the loss does not
    /// depend on yield `None`.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<Tensor<T>> {
        let node = leaf.node.as_ref()?;
        if !node.tape.same_as(&self.tape) || node.generation != self.generation {
            return None;
        }
        let g = self.grads.get(&node.id)?;
        Tensor::new(leaf.shape().to_vec(), g.clone()).ok()
    }

    /// Like [`Gradients::get`] but returns zeros when the loss does not depend on `leaf`.
    pub fn get_or_zeros(&self, leaf: &Tensor<T>) -> Tensor<T> {
        self.get(leaf)
            .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
