use trackerf_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore};

/// Adam with bias correction; moments are kept in 64-bit.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    /// Apply one update. Parameters missing from `grads` count as having
    /// zero gradient. Non-finite gradients abort before anything changes.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = store.param(*id);
            if g.len() != p.value.numel() {
                return Err(CoreError::DimensionMismatch(format!("gradient of {} has {} values", p.name, g.len())));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(CoreError::NonFiniteGradient(format!("{} (value {bad})", p.name)));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            let n = g.len();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value(*id);
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                out.push(T::of(value.data()[k].as_f64() - update));
            }
            let shape = value.shape().to_vec();
            store.set_value(*id, Tensor::new(shape, out)?)?;
        }
        Ok(())
    }
}

/// Divide the learning rate when the windowed mean loss stops improving.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub window: usize,
    pub rel: f64,
    pub max_decays: usize,
    pub decays: usize,
    best: f64,
    since: usize,
    recent: std::collections::VecDeque<f64>,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, window: usize, rel: f64, max_decays: usize) -> Self {
        Self { lr, factor, patience, window: window.max(1), rel, max_decays, decays: 0, best: f64::INFINITY, since: 0, recent: Default::default() }
    }

    /// Record one step's loss and return the learning rate for the next step.
    pub fn observe(&mut self, loss: f64) -> f64 {
        self.recent.push_back(loss);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        if !self.best.is_finite() || mean < self.best - self.rel * self.best.abs() {
            self.best = mean;
            self.since = 0;
        } else {
            self.since += 1;
            if self.since >= self.patience && self.decays < self.max_decays {
                self.lr /= self.factor;
                self.decays += 1;
                self.since = 0;
                self.best = mean;
            }
        }
        self.lr
    }
}
