//! Dense inner loops shared by the tensor ops.
//!
//! Every kernel takes an [`Exec`] selecting the rayon path or the plain
//! sequential loop. Both paths run the same per-row arithmetic in the same
//! order, so their results are bit-identical.

use std::any::TypeId;
use std::sync::atomic::{AtomicU8, Ordering};

use crate::real::Real;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays sequential.
const PAR_MIN_WORK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Parallel when the `parallel` feature is compiled in.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Default for Exec {
    fn default() -> Self {
        Exec::current()
    }
}

// 0 = unset (use compile-time default), 1 = sequential, 2 = parallel.
static EXEC_OVERRIDE: AtomicU8 = AtomicU8::new(0);

impl Exec {
    /// Execution mode used by tensor ops: the process-wide override when set,
    /// else [`Exec::auto`].
    pub fn current() -> Self {
        match EXEC_OVERRIDE.load(Ordering::Relaxed) {
            1 => Exec::Sequential,
            2 => Exec::Parallel,
            _ => Exec::auto(),
        }
    }

    /// Set the process-wide execution mode for tensor ops.
    pub fn set_current(exec: Option<Exec>) {
        let code = match exec {
            None => 0,
            Some(Exec::Sequential) => 1,
            Some(Exec::Parallel) => 2,
        };
        EXEC_OVERRIDE.store(code, Ordering::Relaxed);
    }
}

/// Apply `f(row_index, row)` to each `row_len` chunk of `out`.
pub fn for_each_row<T, F>(exec: Exec, out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    let rows = out.len() / row_len;
    let parallel = exec == Exec::Parallel && rows > 1 && rows * work_per_row >= PAR_MIN_WORK;
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = parallel;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// `c[m,n] = a · b` for strided row-major views, through `matrixmultiply`
/// for the float types and a plain loop otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], rsb: usize, csb: usize, c: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    let last_a = (m - 1) * rsa + k.saturating_sub(1) * csa;
    let last_b = k.saturating_sub(1) * rsb + (n - 1) * csb;
    assert!(k == 0 || (last_a < a.len() && last_b < b.len()), "gemm operand out of range");
    assert!(c.len() >= m * n, "gemm output too small");
    let (rsa, csa, rsb, csb) = (rsa as isize, csa as isize, rsb as isize, csb as isize);
    let n_i = n as isize;
    let id = TypeId::of::<T>();
    // SAFETY: the element type is checked to be exactly f32/f64, and every
    // index the kernel touches lies inside the slices (asserted above).
    unsafe {
        if id == TypeId::of::<f32>() {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr() as *const f32, rsa, csa, b.as_ptr() as *const f32, rsb, csb, 0.0, c.as_mut_ptr() as *mut f32, n_i, 1);
            return;
        }
        if id == TypeId::of::<f64>() {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr() as *const f64, rsa, csa, b.as_ptr() as *const f64, rsb, csb, 0.0, c.as_mut_ptr() as *mut f64, n_i, 1);
            return;
        }
    }
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * rsa as usize + p * csa as usize] * b[p * rsb as usize + j * csb as usize];
            }
            c[i * n + j] = acc;
        }
    }
}

/// Row-blocked product; blocks run on rayon in parallel mode. Splitting
/// rows leaves each element's accumulation order unchanged.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Real>(exec: Exec, m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], rsb: usize, csb: usize, out: &mut [T]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let parallel = exec == Exec::Parallel && m > 1 && m * k * n >= PAR_MIN_WORK;
    #[cfg(feature = "parallel")]
    if parallel {
        let block = m.div_ceil(4 * rayon::current_num_threads()).max(1);
        out.par_chunks_mut(block * n).enumerate().for_each(|(bi, chunk)| {
            let r0 = bi * block;
            let rows = chunk.len() / n;
            gemm(rows, k, n, &a[r0 * rsa..], rsa, csa, b, rsb, csb, chunk);
        });
        return;
    }
    let _ = parallel;
    gemm(m, k, n, a, rsa, csa, b, rsb, csb, out);
}

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul_nn<T: Real>(exec: Exec, a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_rows(exec, m, k, n, a, k, 1, b, n, 1, out);
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(exec: Exec, a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    gemm_rows(exec, m, k, n, a, k, 1, b, 1, k, out);
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Real>(exec: Exec, a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_rows(exec, m, k, n, a, 1, m, b, n, 1, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut out = vec![0.0; m * n];
            matmul_nn(exec, &a, &b, &mut out, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let bt = transpose(&b, k, n);
            matmul_nt(exec, &a, &bt, &mut out, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let at = transpose(&a, m, k);
            matmul_tn(exec, &at, &b, &mut out, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_is_bit_identical() {
        let (m, k, n) = (300, 64, 64);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104_729) % 89) as f32 / 44.0 - 1.0).collect();
        let mut s = vec![0.0; m * n];
        let mut p = vec![0.0; m * n];
        matmul_nn(Exec::Sequential, &a, &b, &mut s, m, k, n);
        matmul_nn(Exec::Parallel, &a, &b, &mut p, m, k, n);
        assert_eq!(s, p);
    }
}
