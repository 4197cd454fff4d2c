use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{for_each_row, matmul_nn, matmul_nt, matmul_tn, Exec};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn output_extent(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

fn im2col<T: Real>(img: &[T], g: &Geom, cols: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            let mut idx = 0;
            for ci in 0..g.c {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        row[idx] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => img[(ci * g.h + y) * g.w + x],
                            None => T::zero(),
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, img: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            let mut idx = 0;
            for ci in 0..g.c {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            img[(ci * g.h + y) * g.w + x] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// 2-D cross-correlation of `[N, C, H, W]` input with `[Co, C, kh, kw]`
    /// weights plus a `[Co]` bias.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        if self.rank() != 4 || weight.rank() != 4 || spec.stride == 0 {
            return Err(mismatch());
        }
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (co, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wc != c || bias.shape() != [co] || h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(mismatch());
        }
        let g = Geom {
            c,
            h,
            w,
            kh,
            kw,
            oh: spec.output_extent(h, kh),
            ow: spec.output_extent(w, kw),
            stride: spec.stride,
            pad: spec.padding,
        };
        let p = g.oh * g.ow;
        let k = g.patch();
        let exec = Exec::current();
        let x = self.data();
        let mut cols = vec![T::zero(); n * p * k];
        for_each_row(exec, &mut cols, p * k, p * k, |i, chunk| {
            im2col(&x[i * c * h * w..(i + 1) * c * h * w], &g, chunk);
        });
        let mut out = vec![T::zero(); n * co * p];
        let wd = weight.data();
        let bd = bias.data();
        for_each_row(exec, &mut out, co * p, co * p * k, |i, chunk| {
            matmul_nt(Exec::Sequential, wd, &cols[i * p * k..(i + 1) * p * k], chunk, co, k, p);
            for (oc, row) in chunk.chunks_mut(p).enumerate() {
                for v in row.iter_mut() {
                    *v += bd[oc];
                }
            }
        });
        let cols = Arc::new(cols);
        let wa = weight.data_arc();
        let in_len = c * h * w;
        Tensor::from_op(
            "conv2d",
            &[self, weight, bias],
            vec![n, co, g.oh, g.ow],
            out,
            move |grad, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); n * in_len];
                    for_each_row(exec, &mut gx, in_len, co * p * k, |i, chunk| {
                        let mut dcols = vec![T::zero(); p * k];
                        matmul_tn(Exec::Sequential, &grad[i * co * p..(i + 1) * co * p], &wa, &mut dcols, p, co, k);
                        col2im(&dcols, &g, chunk);
                    });
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); co * k];
                    let mut tmp = vec![T::zero(); co * k];
                    for i in 0..n {
                        matmul_nn(exec, &grad[i * co * p..(i + 1) * co * p], &cols[i * p * k..(i + 1) * p * k], &mut tmp, co, p, k);
                        for (a, b) in gw.iter_mut().zip(&tmp) {
                            *a += *b;
                        }
                    }
                    gw
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![T::zero(); co];
                    for i in 0..n {
                        for (oc, slot) in gb.iter_mut().enumerate() {
                            let s = (i * co + oc) * p;
                            *slot += grad[s..s + p].iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], b: &[f64], c: usize, h: usize, wd: usize, co: usize, kk: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - kk) / s + 1;
        let ow = (wd + 2 * p - kk) / s + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let y = (oy * s + ky) as isize - p as isize;
                                let xx = (ox * s + kx) as isize - p as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x[(ci * h + y as usize) * wd + xx as usize]
                                        * w[((o * c + ci) * kk + ky) * kk + kx];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (c, h, w, co, k) = (2, 5, 6, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let wt: Vec<f64> = (0..co * c * k * k).map(|i| (i as f64 * 0.7).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        for (s, p) in [(1, 1), (2, 1), (1, 0)] {
            let xt = Tensor::new(vec![1, c, h, w], x.clone()).unwrap();
            let wtt = Tensor::new(vec![co, c, k, k], wt.clone()).unwrap();
            let bt = Tensor::new(vec![co], b.clone()).unwrap();
            let y = xt.conv2d(&wtt, &bt, Conv2dSpec { stride: s, padding: p }).unwrap();
            let want = naive(&x, &wt, &b, c, h, w, co, k, s, p);
            assert_eq!(y.numel(), want.len());
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
