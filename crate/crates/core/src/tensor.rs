//! Dense row-major tensors and the matrix kernels behind the model.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::par;

/// Scalar type the model can run in: `f32` for training, `f64` for gradient checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = a·b + beta·c` on strided matrices (see `matrixmultiply`).
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping `m×k`, `k×n`, `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64c(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).unwrap()
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64c(x.to_f64c())).collect(),
        }
    }
}

/// Layout of one operand of a batched matmul.
#[derive(Debug, Clone, Copy)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatLayout {
    fn strides(self) -> (isize, isize) {
        // storage is row-major `rows x cols`; a transposed view swaps strides
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }

    fn logical(self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }
}

const ROW_BLOCK: usize = 32;

/// `out[b] (+)= op(a[b]) · op(b[b])` for every batch element.
///
/// Operand batches advance by their own size unless `*_shared` is set, in
/// which case the same matrix is used for all batches. Output rows are split
/// into fixed blocks, so the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn batched_gemm<F: Float>(
    batch: usize,
    a: &[F],
    la: MatLayout,
    a_shared: bool,
    b: &[F],
    lb: MatLayout,
    b_shared: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    let a_size = la.rows * la.cols;
    let b_size = lb.rows * lb.cols;
    assert!(a.len() >= if a_shared { a_size } else { a_size * batch });
    assert!(b.len() >= if b_shared { b_size } else { b_size * batch });
    assert_eq!(out.len(), batch * m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    let beta = if accumulate { F::one() } else { F::zero() };
    let rows_per_chunk = if batch == 1 { ROW_BLOCK } else { m };
    par::for_each_chunk_mut(out, rows_per_chunk * n, |ci, c| {
        let (bi, row0) = if batch == 1 {
            (0, ci * ROW_BLOCK)
        } else {
            (ci, 0)
        };
        let rows = c.len() / n;
        let a_base = if a_shared { 0 } else { bi * a_size };
        let b_base = if b_shared { 0 } else { bi * b_size };
        if k == 0 {
            if !accumulate {
                c.iter_mut().for_each(|x| *x = F::zero());
            }
            return;
        }
        // SAFETY: offsets stay within the asserted operand extents; `c` is an exclusive slice.
        unsafe {
            let a_ptr = a.as_ptr().add(a_base).offset(row0 as isize * rsa);
            F::gemm_raw(
                rows,
                k,
                n,
                a_ptr,
                rsa,
                csa,
                b.as_ptr().add(b_base),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Plain `[m,k]·[k,n]`.
pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    batched_gemm(
        1,
        a,
        MatLayout { rows: m, cols: k, transposed: false },
        true,
        b,
        MatLayout { rows: k, cols: n, transposed: false },
        true,
        &mut out,
        false,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let got = matmul(&a, &b, m, k, n);
        for (g, e) in got.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_layouts() {
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.5).collect();
        let expected = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut out = vec![0.0; m * n];
        batched_gemm(
            1,
            &at,
            MatLayout { rows: k, cols: m, transposed: true },
            true,
            &bt,
            MatLayout { rows: n, cols: k, transposed: true },
            true,
            &mut out,
            false,
        );
        assert_eq!(out, expected);
    }

    #[test]
    fn batched_and_accumulate() {
        let (bsz, m, k, n) = (3, 4, 2, 5);
        let a: Vec<f64> = (0..bsz * m * k).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 + i as f64).collect();
        let mut out = vec![1.0; bsz * m * n];
        batched_gemm(
            bsz,
            &a,
            MatLayout { rows: m, cols: k, transposed: false },
            false,
            &b,
            MatLayout { rows: k, cols: n, transposed: false },
            true,
            &mut out,
            true,
        );
        for bi in 0..bsz {
            let e = naive(&a[bi * m * k..(bi + 1) * m * k], &b, m, k, n);
            for (g, e) in out[bi * m * n..(bi + 1) * m * n].iter().zip(e) {
                assert_eq!(*g, e + 1.0);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (m, k, n) = (200, 64, 48);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919) % 1000) as f32 / 997.0 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729) % 1000) as f32 / 991.0 - 0.5).collect();
        let p = matmul(&a, &b, m, k, n);
        let s = par::sequential(|| matmul(&a, &b, m, k, n));
        assert_eq!(p, s);
    }
}
