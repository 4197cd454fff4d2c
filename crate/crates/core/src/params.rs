//! Named parameter storage and the small layers built on it.

use rand::Rng;
use trackerf_tensor::{Real, Tape, Tensor};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Registration order within the store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered set of named parameters. Order is insertion order and is what
/// checkpoints and the optimizer iterate over.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value: value.detach(), trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(CoreError::DimensionMismatch(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value.detach();
        Ok(())
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Values for one forward pass: trainable parameters become leaves of
    /// `tape`, the rest (or everything, without a tape) stay detached.
    pub fn bind(&self, tape: Option<&Tape<T>>) -> Bound<T> {
        let values = self
            .params
            .iter()
            .map(|p| match tape {
                Some(t) if p.trainable => t.leaf(&p.value),
                _ => p.value.clone(),
            })
            .collect();
        Bound { values }
    }
}

/// Parameter values for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound<T: Real> {
    values: Vec<Tensor<T>>,
}

impl<T: Real> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Substitute a value for this pass, e.g. a leaf owned by the caller.
    pub fn replace(&mut self, id: ParamId, value: Tensor<T>) {
        self.values[id.0] = value;
    }
}

/// Glorot-uniform matrix.
pub fn glorot<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive extents")
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, d_in, d_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b, d_in, d_out }
    }

    /// Weight and bias start at exactly zero.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(vec![d_in, d_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.matmul(p.get(self.w))?.add(p.get(self.b))?)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(vec![dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.layer_norm(T::of(LAYER_NORM_EPS))?.mul(p.get(self.gain))?.add(p.get(self.bias))?)
    }
}
