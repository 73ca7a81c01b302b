//! Dense kernels shared by forward and backward passes. Reductions
//! accumulate in `f64` regardless of the storage type.

use super::tensor::Real;

/// `out[m, n] = a[m, k] * b[k, n]`, overwriting `out`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let b64: Vec<f64> = b.iter().map(|v| v.f64()).collect();
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let aip = aip.f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &b64[p * n..(p + 1) * n];
            for (dst, &bv) in acc.iter_mut().zip(brow) {
                *dst += aip * bv;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::of(v);
        }
    }
}

/// Row-major transpose of an `[rows, cols]` block.
pub fn transpose2<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// General axis permutation; `out` has shape `shape[perm[i]]`.
pub fn permute<T: Real>(shape: &[usize], perm: &[usize], src: &[T]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis unrolled
        let s = step[last];
        for j in 0..out_shape[last] {
            out.push(src[offset + j * s]);
        }
        // advance odometer over the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
