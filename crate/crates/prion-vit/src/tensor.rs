//! Dense row-major f64 tensors and the raw compute kernels behind them.
//!
//! [`Tensor`] is a plain value type: shape plus a flat buffer. The kernels in
//! [`kernels`] come in sequential and rayon-parallel flavors; the parallel
//! versions split work so that every output element is accumulated in the same
//! order as the sequential code, so results are bitwise identical with the
//! `parallel` feature on or off.

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "zero extent".into(),
            });
        }
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape implies {expected} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} != {}", n, self.numel()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }
}

/// True when `small` broadcasts over `large` by suffix alignment
/// (e.g. `[D]` into `[B,N,D]`, `[N,D]` into `[B,N,D]`, or equal shapes).
pub fn suffix_broadcastable(small: &[usize], large: &[usize]) -> bool {
    small.len() <= large.len() && *small == large[large.len() - small.len()..]
}

pub mod kernels {
    //! Flat-buffer compute kernels, sequential and parallel.
    //!
    //! Matrix products take row-major buffers with explicit extents. `batch`
    //! counts leading matrices in `a`; `b_batched` says whether `b` carries the
    //! same batch dimension or is shared (a 2-D weight).

    #[cfg(feature = "parallel")]
    use rayon::prelude::*;

    /// Below this many output elements the sequential path is used even when
    /// the `parallel` feature is on; rayon dispatch overhead dominates there.
    pub const PAR_MIN_OUT: usize = 16 * 1024;

    #[inline]
    fn nn_row(row: &mut [f64], a_row: &[f64], b: &[f64], k: usize, n: usize) {
        for (p, &ap) in a_row.iter().enumerate().take(k) {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
                *o += ap * bv;
            }
        }
    }

    /// C[..,m,n] = A[..,m,k] x B[k,n] (or B[..,k,n] when `b_batched`).
    pub fn matmul_nn_seq(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    ) -> Vec<f64> {
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if b_batched { bi * k * n } else { 0 };
            let b_mat = &b[b_off..b_off + k * n];
            for i in 0..m {
                let row = &mut out[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                nn_row(row, &a[a_off + i * k..a_off + (i + 1) * k], b_mat, k, n);
            }
        }
        out
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_nn_par(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    ) -> Vec<f64> {
        let mut out = vec![0.0; batch * m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
            let bi = r / m;
            let i = r % m;
            let b_off = if b_batched { bi * k * n } else { 0 };
            nn_row(
                row,
                &a[bi * m * k + i * k..bi * m * k + (i + 1) * k],
                &b[b_off..b_off + k * n],
                k,
                n,
            );
        });
        out
    }

    pub fn matmul_nn(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    ) -> Vec<f64> {
        #[cfg(feature = "parallel")]
        if batch * m * n >= PAR_MIN_OUT {
            return matmul_nn_par(a, b, batch, m, k, n, b_batched);
        }
        matmul_nn_seq(a, b, batch, m, k, n, b_batched)
    }

    #[inline]
    fn nt_row(row: &mut [f64], a_row: &[f64], b: &[f64], k: usize) {
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                s += av * bv;
            }
            *o = s;
        }
    }

    /// C[..,m,n] = A[..,m,k] x B^T where B is [n,k] (or [..,n,k] when `b_batched`).
    pub fn matmul_nt_seq(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    ) -> Vec<f64> {
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let b_off = if b_batched { bi * n * k } else { 0 };
            let b_mat = &b[b_off..b_off + n * k];
            for i in 0..m {
                let row = &mut out[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                nt_row(row, &a[bi * m * k + i * k..bi * m * k + (i + 1) * k], b_mat, k);
            }
        }
        out
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_nt_par(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    ) -> Vec<f64> {
        let mut out = vec![0.0; batch * m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
            let bi = r / m;
            let i = r % m;
            let b_off = if b_batched { bi * n * k } else { 0 };
            nt_row(
                row,
                &a[bi * m * k + i * k..bi * m * k + (i + 1) * k],
                &b[b_off..b_off + n * k],
                k,
            );
        });
        out
    }

    pub fn matmul_nt(
        a: &[f64],
        b: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    ) -> Vec<f64> {
        #[cfg(feature = "parallel")]
        if batch * m * n >= PAR_MIN_OUT {
            return matmul_nt_par(a, b, batch, m, k, n, b_batched);
        }
        matmul_nt_seq(a, b, batch, m, k, n, b_batched)
    }

    /// C = A^T x G with A[..,m,k], G[..,m,n]. When `sum_batches` the result is
    /// a single [k,n] accumulated over every batch (weight-gradient case),
    /// otherwise per-batch [..,k,n]. Accumulation runs in ascending batch and
    /// row order in both the sequential and parallel paths.
    pub fn matmul_tn_seq(
        a: &[f64],
        g: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        sum_batches: bool,
    ) -> Vec<f64> {
        let out_batches = if sum_batches { 1 } else { batch };
        let mut out = vec![0.0; out_batches * k * n];
        for bi in 0..batch {
            let o_off = if sum_batches { 0 } else { bi * k * n };
            for i in 0..m {
                let a_row = &a[bi * m * k + i * k..bi * m * k + (i + 1) * k];
                let g_row = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                for (p, &ap) in a_row.iter().enumerate() {
                    let row = &mut out[o_off + p * n..o_off + (p + 1) * n];
                    for (o, &gv) in row.iter_mut().zip(g_row.iter()) {
                        *o += ap * gv;
                    }
                }
            }
        }
        out
    }

    #[cfg(feature = "parallel")]
    pub fn matmul_tn_par(
        a: &[f64],
        g: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        sum_batches: bool,
    ) -> Vec<f64> {
        if sum_batches {
            let mut out = vec![0.0; k * n];
            // One task per output row p; each scans batches/rows in order.
            out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
                for bi in 0..batch {
                    for i in 0..m {
                        let ap = a[bi * m * k + i * k + p];
                        let g_row = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                        for (o, &gv) in row.iter_mut().zip(g_row.iter()) {
                            *o += ap * gv;
                        }
                    }
                }
            });
            out
        } else {
            let mut out = vec![0.0; batch * k * n];
            out.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
                let bi = r / k;
                let p = r % k;
                for i in 0..m {
                    let ap = a[bi * m * k + i * k + p];
                    let g_row = &g[bi * m * n + i * n..bi * m * n + (i + 1) * n];
                    for (o, &gv) in row.iter_mut().zip(g_row.iter()) {
                        *o += ap * gv;
                    }
                }
            });
            out
        }
    }

    pub fn matmul_tn(
        a: &[f64],
        g: &[f64],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        sum_batches: bool,
    ) -> Vec<f64> {
        #[cfg(feature = "parallel")]
        if batch * m * n.max(k) >= PAR_MIN_OUT {
            return matmul_tn_par(a, g, batch, m, k, n, sum_batches);
        }
        matmul_tn_seq(a, g, batch, m, k, n, sum_batches)
    }
}

/// Elementwise binary with suffix broadcast; `small` cycles over `large`.
/// Returns a buffer shaped like the larger operand.
pub(crate) fn broadcast_zip(
    large: &Tensor,
    small: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    if !suffix_broadcastable(small.shape(), large.shape()) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: large.shape().to_vec(),
            rhs: small.shape().to_vec(),
        });
    }
    let cycle = small.numel();
    let ld = large.data();
    let sd = small.data();
    let mut out = Vec::with_capacity(ld.len());
    for (i, &lv) in ld.iter().enumerate() {
        out.push(f(lv, sd[i % cycle]));
    }
    Ok(out)
}

/// Sum-reduce a gradient shaped like `large_shape` down to `small_shape`
/// (inverse of suffix broadcast).
pub(crate) fn reduce_to_suffix(grad: &[f64], small_numel: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_numel];
    for (i, &g) in grad.iter().enumerate() {
        out[i % small_numel] += g;
    }
    out
}
