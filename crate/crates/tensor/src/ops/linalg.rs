use crate::error::{Result, TensorError};
use crate::kernels::{for_each_row, matmul_nn, matmul_nt, matmul_tn, Exec};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Tensor<T> {
    /// `[..., K] · [K, N] -> [..., N]`; leading axes of the left operand act as rows.
    pub fn matmul(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if w.rank() != 2 || self.rank() == 0 {
            return Err(mismatch());
        }
        let k = *self.shape().last().unwrap();
        if w.shape()[0] != k {
            return Err(mismatch());
        }
        let n = w.shape()[1];
        let m = self.numel() / k;
        let exec = Exec::current();
        let mut out = vec![T::zero(); m * n];
        matmul_nn(exec, self.data(), w.data(), &mut out, m, k, n);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (aa, wa) = (self.data_arc(), w.data_arc());
        Tensor::from_op("matmul", &[self, w], shape, out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                matmul_nt(exec, g, &wa, &mut ga, m, n, k);
                ga
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); k * n];
                matmul_tn(exec, &aa, g, &mut gw, k, m, n);
                gw
            });
            vec![ga, gw]
        })
    }

    /// Batched product `[B, M, K] · [B, K, N]`, or `[B, M, K] · [B, N, K]ᵀ`
    /// when `transpose_rhs` is set.
    pub fn bmm(&self, rhs: &Tensor<T>, transpose_rhs: bool) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if self.rank() != 3 || rhs.rank() != 3 || self.shape()[0] != rhs.shape()[0] {
            return Err(mismatch());
        }
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = if transpose_rhs {
            if rhs.shape()[2] != k {
                return Err(mismatch());
            }
            rhs.shape()[1]
        } else {
            if rhs.shape()[1] != k {
                return Err(mismatch());
            }
            rhs.shape()[2]
        };
        let exec = Exec::current();
        let (ad, rd) = (self.data(), rhs.data());
        let mut out = vec![T::zero(); b * m * n];
        for_each_row(exec, &mut out, m * n, m * k * n, |bi, chunk| {
            let a = &ad[bi * m * k..(bi + 1) * m * k];
            let r = &rd[bi * k * n..(bi + 1) * k * n];
            if transpose_rhs {
                matmul_nt(Exec::Sequential, a, r, chunk, m, k, n);
            } else {
                matmul_nn(Exec::Sequential, a, r, chunk, m, k, n);
            }
        });
        let (aa, ra) = (self.data_arc(), rhs.data_arc());
        Tensor::from_op("bmm", &[self, rhs], vec![b, m, n], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); b * m * k];
                for_each_row(exec, &mut ga, m * k, m * k * n, |bi, chunk| {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let r = &ra[bi * k * n..(bi + 1) * k * n];
                    if transpose_rhs {
                        matmul_nn(Exec::Sequential, gb, r, chunk, m, n, k);
                    } else {
                        matmul_nt(Exec::Sequential, gb, r, chunk, m, n, k);
                    }
                });
                ga
            });
            let gr = needs[1].then(|| {
                let mut gr = vec![T::zero(); b * k * n];
                for_each_row(exec, &mut gr, k * n, m * k * n, |bi, chunk| {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let a = &aa[bi * m * k..(bi + 1) * m * k];
                    if transpose_rhs {
                        matmul_tn(Exec::Sequential, gb, a, chunk, n, m, k);
                    } else {
                        matmul_tn(Exec::Sequential, a, gb, chunk, k, m, n);
                    }
                });
                gr
            });
            vec![ga, gr]
        })
    }
}
