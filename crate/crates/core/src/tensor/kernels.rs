// Raw row-major kernels. Every output element is produced by a fixed
// sequential reduction order, so results are identical whether or not the
// rows are distributed over threads.

use rayon::prelude::*;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;
/// Output rows updated together per pass over `b`.
const ROW_BLOCK: usize = 4;

/// `out[m,n] += a[m,k] · b[k,n]`, each element summed over `k` in order.
fn gemm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if n == 0 || m == 0 {
        return;
    }
    let block = |(blk, out_blk): (usize, &mut [f64])| {
        let i0 = blk * ROW_BLOCK;
        let rows = out_blk.len() / n;
        if rows == ROW_BLOCK {
            let (o0, rest) = out_blk.split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let a0 = &a[i0 * k..(i0 + 1) * k];
            let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
            let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
            let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
            for kk in 0..k {
                let b_row = &b[kk * n..(kk + 1) * n];
                let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                let (o0, o1, o2, o3) = (&mut o0[..n], &mut o1[..n], &mut o2[..n], &mut o3[..n]);
                for j in 0..n {
                    let bv = b_row[j];
                    o0[j] += x0 * bv;
                    o1[j] += x1 * bv;
                    o2[j] += x2 * bv;
                    o3[j] += x3 * bv;
                }
            }
        } else {
            for (r, out_row) in out_blk.chunks_mut(n).enumerate() {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[m,n] = a[m,k] · b[k,n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    gemm_acc(a, b, m, k, n, out);
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn mm_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    let bt = transpose(b, k, n);
    gemm_acc(g, &bt, m, n, k, out);
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let at = transpose(a, m, k);
    gemm_acc(&at, g, k, m, n, out);
}
/// Numpy-style broadcast of two shapes, right-aligned.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat index of `out_shape`, the flat index of the broadcast
/// source with shape `in_shape`. Caller guarantees compatibility.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_str = strides(in_shape);
    let mut eff = vec![0; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + offset] = in_str[i];
        }
    }
    gather_map(out_shape, &eff)
}

/// Walks `shape` in row-major order, emitting `Σ index[i]·stride[i]`.
fn gather_map(shape: &[usize], stride: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    if shape.is_empty() {
        map.push(0);
        return map;
    }
    let rank = shape.len();
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..shape[last] {
            map.push(base + j * stride[last]);
        }
        // increment the outer indices
        let mut d = last;
        loop {
            if d == 0 {
                return map;
            }
            d -= 1;
            idx[d] += 1;
            base += stride[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= stride[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// For each flat index of the permuted output, the flat source index.
pub(crate) fn permute_map(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_str = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let out_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let map = gather_map(&out_shape, &out_str);
    (out_shape, map)
}
