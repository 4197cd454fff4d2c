use std::sync::Arc;

use super::{removed_axis, split_axis};
use crate::error::{Result, TensorError};
use crate::kernels::{for_each_row, Exec};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let n = self.numel();
        Tensor::from_op("sum_axis", &[self], removed_axis(self.shape(), axis), out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); n];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                gx
            })]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = split_axis(self.shape(), axis)?.1;
        self.sum_axis(axis)?.scale(T::one() / T::of(len as f64))
    }

    /// Population standard deviation over `axis`. Where the deviation is
    /// zero the gradient is taken as zero.
    pub fn std_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let nl = T::of(len as f64);
        let mut mean = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for l in 0..len {
                    s += x[(o * len + l) * inner + i];
                }
                let mu = s / nl;
                let mut v = T::zero();
                for l in 0..len {
                    let d = x[(o * len + l) * inner + i] - mu;
                    v += d * d;
                }
                mean[o * inner + i] = mu;
                out[o * inner + i] = (v / nl).sqrt();
            }
        }
        let xa = self.data_arc();
        let sd = Arc::new(out.clone());
        let n = self.numel();
        Tensor::from_op("std_axis", &[self], removed_axis(self.shape(), axis), out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); n];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        if sd[k] == T::zero() {
                            continue;
                        }
                        let c = g[k] / (nl * sd[k]);
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            gx[idx] = c * (xa[idx] - mean[k]);
                        }
                    }
                }
                gx
            })]
        })
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum_all", &[self], Vec::new(), vec![s], move |g, needs| {
            vec![needs[0].then(|| vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = T::of(self.numel() as f64);
        self.sum_all()?.scale(T::one() / n)
    }

    /// Softmax over `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis(self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = T::neg_infinity();
                for l in 0..len {
                    m = m.max(x[at(l)]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        let y = Arc::new(out.clone());
        Tensor::from_op("softmax", &[self], self.shape().to_vec(), out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dotp = T::zero();
                        for l in 0..len {
                            dotp += y[at(l)] * g[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dotp);
                        }
                    }
                }
                gx
            })]
        })
    }

    /// Softmax over the last axis restricted to entries where `keep` is true.
    /// Dropped entries output 0; a row with nothing kept outputs all zeros.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Tensor<T>> {
        if keep.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let len = *self.shape().last().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "masked_softmax needs rank >= 1".into(),
        })?;
        let x = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for_each_row(Exec::current(), &mut out, len, len * 4, |r, row| {
            let xs = &x[r * len..(r + 1) * len];
            let ks = &keep[r * len..(r + 1) * len];
            let mut m = T::neg_infinity();
            for (v, k) in xs.iter().zip(ks) {
                if *k {
                    m = m.max(*v);
                }
            }
            if m == T::neg_infinity() {
                return;
            }
            let mut s = T::zero();
            for ((o, v), k) in row.iter_mut().zip(xs).zip(ks) {
                if *k {
                    *o = (*v - m).exp();
                    s += *o;
                }
            }
            for o in row.iter_mut() {
                *o /= s;
            }
        });
        let y = Arc::new(out.clone());
        Tensor::from_op("masked_softmax", &[self], self.shape().to_vec(), out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); y.len()];
                for_each_row(Exec::current(), &mut gx, len, len * 4, |r, row| {
                    let ys = &y[r * len..(r + 1) * len];
                    let gs = &g[r * len..(r + 1) * len];
                    let dotp: T = ys.iter().zip(gs).map(|(a, b)| *a * *b).sum();
                    for ((o, yv), gv) in row.iter_mut().zip(ys).zip(gs) {
                        *o = *yv * (*gv - dotp);
                    }
                });
                gx
            })]
        })
    }

    /// Normalize over the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: T) -> Result<Tensor<T>> {
        let len = *self.shape().last().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "layer_norm needs rank >= 1".into(),
        })?;
        let x = self.data();
        let rows = self.numel() / len;
        let nl = T::of(len as f64);
        let mut out = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let xs = &x[r * len..(r + 1) * len];
            let mu = xs.iter().copied().sum::<T>() / nl;
            let var = xs.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / nl;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * len..(r + 1) * len].iter_mut().zip(xs) {
                *o = (*v - mu) * is;
            }
        }
        let y = Arc::new(out.clone());
        Tensor::from_op("layer_norm", &[self], self.shape().to_vec(), out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); y.len()];
                for_each_row(Exec::current(), &mut gx, len, len * 6, |r, row| {
                    let ys = &y[r * len..(r + 1) * len];
                    let gs = &g[r * len..(r + 1) * len];
                    let gm = gs.iter().copied().sum::<T>() / nl;
                    let gy = gs.iter().zip(ys).map(|(a, b)| *a * *b).sum::<T>() / nl;
                    for ((o, yv), gv) in row.iter_mut().zip(ys).zip(gs) {
                        *o = inv_std[r] * (*gv - gm - *yv * gy);
                    }
                });
                gx
            })]
        })
    }
}
