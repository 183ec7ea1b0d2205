//! Shared low-level helpers: strided matrix multiplies (backed by
//! `matrixmultiply`, which picks SIMD kernels at runtime) and odometer-style
//! iteration for broadcasting. All routines produce identical results
//! regardless of thread count: parallel paths only ever write disjoint
//! output blocks.

use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Work threshold (in multiply-adds) above which batched gemm fans out
/// across the rayon pool.
const PAR_GEMM_THRESHOLD: usize = 1 << 19;

/// C[m,n] (+)= A · B where A is `m x k` and B is `k x n`. `ta`/`tb` flag
/// row-major buffers holding the transposed operand. `beta` of one
/// accumulates into `c`, zero overwrites.
pub fn gemm_2d<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    beta: S,
    c: &mut [S],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched gemm over `n_batch` independent problems. `a_batched`/`b_batched`
/// select whether each operand advances per batch element or is shared.
#[allow(clippy::too_many_arguments)]
pub fn gemm_batched<S: Scalar>(
    n_batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    a_batched: bool,
    b: &[S],
    tb: bool,
    b_batched: bool,
    beta: S,
    c: &mut [S],
) {
    let a_step = if a_batched { m * k } else { 0 };
    let b_step = if b_batched { k * n } else { 0 };
    let run = |(i, cb): (usize, &mut [S])| {
        gemm_2d(m, k, n, &a[i * a_step..], ta, &b[i * b_step..], tb, beta, cb);
    };
    if n_batch > 1 && n_batch * m * k * n >= PAR_GEMM_THRESHOLD {
        c.par_chunks_mut(m * n).enumerate().for_each(run);
    } else {
        c.chunks_mut(m * n).enumerate().for_each(run);
    }
}

/// Split a shape at `axis` into (outer, axis length, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Broadcast two shapes numpy-style (right-aligned, 1s stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(CoreError::shape(op, a, b));
        }
        out[d] = da.max(db);
    }
    Ok(out)
}

/// Row-major element strides of `in_shape` as seen from `out_shape`
/// (right-aligned; broadcast dimensions get stride 0).
pub fn strides_for(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut padded = vec![1usize; rank];
    padded[offset..].copy_from_slice(in_shape);
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }
    strides
}

/// Visit every flat index of `out_shape` together with the offset into a
/// strided source (odometer walk; O(1) amortized per element).
pub fn for_each_offset(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..numel {
        f(i, off);
        for d in (0..rank).rev() {
            coords[d] += 1;
            off += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Visit every flat output index with offsets into two strided sources.
pub fn for_each_offset2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0usize, 0usize);
    for i in 0..numel {
        f(i, a_off, b_off);
        for d in (0..rank).rev() {
            coords[d] += 1;
            a_off += sa[d];
            b_off += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            a_off -= sa[d] * out_shape[d];
            b_off -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Sum `grad` (shaped `from`) into `buf` (shaped `to`, broadcastable to
/// `from`).
pub fn reduce_into<S: Scalar>(grad: &[S], from: &[usize], to: &[usize], buf: &mut [S]) {
    let strides = strides_for(from, to);
    for_each_offset(from, &strides, |i, off| {
        buf[off] += grad[i];
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_2d_matches_hand_result() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut c = [0.0f64; 2];
        gemm_2d(2, 2, 1, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1,2],[3,4]]; a^T * a = [[10,14],[14,20]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        gemm_2d(2, 2, 2, &a, true, &a, false, 0.0, &mut c);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(
            broadcast_shape(&[4, 1, 3], &[2, 3], "t").unwrap(),
            vec![4, 2, 3]
        );
        assert!(broadcast_shape(&[4, 2], &[3, 2], "t").is_err());
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        // grad shaped [2,2], target [2] (columns)
        let g = [1.0f64, 2.0, 3.0, 4.0];
        let mut buf = [0.0f64; 2];
        reduce_into(&g, &[2, 2], &[2], &mut buf);
        assert_eq!(buf, [4.0, 6.0]);
    }
}
