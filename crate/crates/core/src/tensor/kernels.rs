/// `out += a (p×q) · b (q×r)`, all row-major.
///
/// Each output element accumulates its products in increasing `k`, the same
/// order as the textbook triple loop, so results match it bit for bit.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    for (arow, orow) in a.chunks_exact(q.max(1)).zip(out.chunks_exact_mut(r.max(1))) {
        if q == 0 || r == 0 {
            break;
        }
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
