use std::sync::Arc;

use super::split_axis;
use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel_of, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position, the flat source index under an axis permutation.
fn permutation_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel_of(shape);
    let mut index = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return vec![0];
    }
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        index.push(src);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    index
}

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op("reshape", &[self], shape.to_vec(), self.to_vec(), |g, needs| {
            vec![needs[0].then(|| g.to_vec())]
        })
    }

    /// Reorder axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                shape: self.shape().to_vec(),
                reason: format!("bad permutation {axes:?}"),
            });
        }
        let index = permutation_index(self.shape(), axes);
        let x = self.data();
        let out: Vec<T> = index.iter().map(|&i| x[i]).collect();
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        let index = Arc::new(index);
        Tensor::from_op("permute", &[self], shape, out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] = g[o];
                }
                gx
            })]
        })
    }

    /// Explicit expand: `shape` may add leading axes and stretch size-1 axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let err = || TensorError::ShapeMismatch {
            op: "broadcast_to",
            lhs: self.shape().to_vec(),
            rhs: shape.to_vec(),
        };
        if shape.len() < self.rank() {
            return Err(err());
        }
        let lead = shape.len() - self.rank();
        let mut src_shape = vec![1; lead];
        src_shape.extend_from_slice(self.shape());
        for (s, t) in src_shape.iter().zip(shape) {
            if *s != *t && *s != 1 {
                return Err(err());
            }
        }
        let src_strides = strides(&src_shape);
        let eff: Vec<usize> = src_shape
            .iter()
            .zip(&src_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let n = numel_of(shape);
        let rank = shape.len();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..n {
            index.push(src);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                counter[d] += 1;
                src += eff[d];
                if counter[d] < shape[d] {
                    break;
                }
                src -= eff[d] * shape[d];
                counter[d] = 0;
            }
        }
        let x = self.data();
        let out: Vec<T> = index.iter().map(|&i| x[i]).collect();
        let m = self.numel();
        Tensor::from_op("broadcast_to", &[self], shape.to_vec(), out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); m];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
                gx
            })]
        })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?;
        let (outer, _, inner) = split_axis(first.shape(), axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let (o, l, i) = split_axis(p.shape(), axis)?;
            let same_rank = p.rank() == first.rank();
            if o != outer || i != inner || !same_rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lens.push(l);
        }
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        Tensor::from_op("concat", parts, shape, out, move |g, needs| {
            let mut offset = 0;
            let mut res = Vec::with_capacity(lens.len());
            for (k, &l) in lens.iter().enumerate() {
                if needs[k] {
                    let mut gp = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + l * inner]);
                    }
                    res.push(Some(gp));
                } else {
                    res.push(None);
                }
                offset += l;
            }
            res
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (outer, full, inner) = split_axis(self.shape(), axis)?;
        if len == 0 || start + len > full {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                extent: full,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Tensor::from_op("slice", &[self], shape, out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); n];
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                gx
            })]
        })
    }

    /// Select entries of `axis` by index; repeated indices accumulate gradient.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        let (outer, full, inner) = split_axis(self.shape(), axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                extent: full,
            });
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: self.shape().to_vec(),
                reason: "gather with no indices".into(),
            });
        }
        let k = indices.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * full + i) * inner;
                out.extend_from_slice(&self.data()[s..s + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = k;
        let idx = indices.to_vec();
        let n = self.numel();
        Tensor::from_op("gather", &[self], shape, out, move |g, needs| {
            vec![needs[0].then(|| {
                let mut gx = vec![T::zero(); n];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let s = (o * full + i) * inner;
                        let gs = (o * k + j) * inner;
                        for t in 0..inner {
                            gx[s + t] += g[gs + t];
                        }
                    }
                }
                gx
            })]
        })
    }
}
