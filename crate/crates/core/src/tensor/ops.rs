use std::rc::Rc;

use super::kernels::{gemm_acc, transpose};
use super::{numel, opcount, Tensor};
use crate::error::{dim_err, usage_err, Result};

/// Additive attention bias of shape `(batch, q_len, k_len)` where `batch` is
/// 1 (shared by every batch row) or the score tensor's batch extent.
#[derive(Clone, Debug)]
pub struct MaskBias {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    data: Rc<Vec<f64>>,
}

impl MaskBias {
    pub fn new(batch: usize, q_len: usize, k_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * q_len * k_len {
            return dim_err(format!(
                "mask bias ({batch}, {q_len}, {k_len}) given {} values",
                data.len()
            ));
        }
        Ok(Self {
            batch,
            q_len,
            k_len,
            data: Rc::new(data),
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for k in 0..inner_len {
            out.push(data[base + k * inner_stride]);
        }
        // Advance the outer multi-index.
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl Tensor {
    /// Batched matrix product `[..., p, q] × [..., q, r]`. A rank-2 right
    /// operand is shared by every leading batch index.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        if a.rank() < 2 || b.rank() < 2 {
            return dim_err(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                a.shape, b.shape
            ));
        }
        let (p, q) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
        let (q2, r) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
        let a_batch = &a.shape[..a.rank() - 2];
        let b_batch = &b.shape[..b.rank() - 2];
        let shared = b.rank() == 2;
        if q != q2 || (!shared && a_batch != b_batch) {
            return dim_err(format!(
                "matmul shape mismatch: {:?} x {:?}",
                a.shape, b.shape
            ));
        }
        let nb = numel(a_batch);
        let mut shape = a_batch.to_vec();
        shape.extend([p, r]);
        let mut out = vec![0.0; nb * p * r];
        if shared {
            gemm_acc(&a.data, &b.data, &mut out, nb * p, q, r);
        } else {
            for i in 0..nb {
                gemm_acc(
                    &a.data[i * p * q..(i + 1) * p * q],
                    &b.data[i * q * r..(i + 1) * q * r],
                    &mut out[i * p * r..(i + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        opcount::add_macs((nb * p * q * r) as u64);
        let (ad, bd) = (Rc::clone(&a.data), Rc::clone(&b.data));
        Ok(Tensor::record(&[a, b], shape, out, move |ids| {
            let (ia, ib) = (ids[0], ids[1]);
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    let da = sink.buf(ia);
                    if shared {
                        let bt = transpose(&bd, q, r);
                        gemm_acc(g, &bt, da, nb * p, r, q);
                    } else {
                        for i in 0..nb {
                            let bt = transpose(&bd[i * q * r..(i + 1) * q * r], q, r);
                            gemm_acc(
                                &g[i * p * r..(i + 1) * p * r],
                                &bt,
                                &mut da[i * p * q..(i + 1) * p * q],
                                p,
                                r,
                                q,
                            );
                        }
                    }
                }
                if let Some(ib) = ib {
                    let db = sink.buf(ib);
                    if shared {
                        let at = transpose(&ad, nb * p, q);
                        gemm_acc(&at, g, db, q, nb * p, r);
                    } else {
                        for i in 0..nb {
                            let at = transpose(&ad[i * p * q..(i + 1) * p * q], p, q);
                            gemm_acc(
                                &at,
                                &g[i * p * r..(i + 1) * p * r],
                                &mut db[i * q * r..(i + 1) * q * r],
                                q,
                                p,
                                r,
                            );
                        }
                    }
                }
            })
        }))
    }

    /// Elementwise sum. `rhs` may have the same shape or a trailing suffix of
    /// this shape, in which case it is repeated over the leading axes.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, rhs);
        if b.rank() > a.rank() || a.shape[a.rank() - b.rank()..] != b.shape[..] {
            return dim_err(format!("add shape mismatch: {:?} + {:?}", a.shape, b.shape));
        }
        let bl = b.numel();
        let out: Vec<f64> = if bl == 0 {
            a.data.to_vec()
        } else {
            a.data
                .iter()
                .zip(b.data.iter().cycle())
                .map(|(x, y)| x + y)
                .collect()
        };
        Ok(Tensor::record(&[a, b], a.shape.clone(), out, move |ids| {
            let (ia, ib) = (ids[0], ids[1]);
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    sink.add(ia, g);
                }
                if let Some(ib) = ib {
                    let db = sink.buf(ib);
                    if bl > 0 {
                        for chunk in g.chunks_exact(bl) {
                            for (d, v) in db.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                }
            })
        }))
    }

    fn same_shape(&self, rhs: &Tensor, op: &str) -> Result<()> {
        if self.shape != rhs.shape {
            return dim_err(format!(
                "{op} shape mismatch: {:?} vs {:?}",
                self.shape, rhs.shape
            ));
        }
        Ok(())
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(x, y)| x - y).collect();
        Ok(Tensor::record(&[self, rhs], self.shape.clone(), out, |ids| {
            let (ia, ib) = (ids[0], ids[1]);
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    sink.add(ia, g);
                }
                if let Some(ib) = ib {
                    for (d, v) in sink.buf(ib).iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            })
        }))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let out = self.data.iter().zip(rhs.data.iter()).map(|(x, y)| x * y).collect();
        let (ad, bd) = (Rc::clone(&self.data), Rc::clone(&rhs.data));
        Ok(Tensor::record(&[self, rhs], self.shape.clone(), out, move |ids| {
            let (ia, ib) = (ids[0], ids[1]);
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    for ((d, gv), bv) in sink.buf(ia).iter_mut().zip(g).zip(bd.iter()) {
                        *d += gv * bv;
                    }
                }
                if let Some(ib) = ib {
                    for ((d, gv), av) in sink.buf(ib).iter_mut().zip(g).zip(ad.iter()) {
                        *d += gv * av;
                    }
                }
            })
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data.iter().map(|x| x * s).collect();
        Tensor::record(&[self], self.shape.clone(), out, move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    for (d, v) in sink.buf(ia).iter_mut().zip(g) {
                        *d += v * s;
                    }
                }
            })
        })
    }

    pub fn gelu(&self) -> Tensor {
        let out = self.data.iter().map(|&x| gelu_scalar(x)).collect();
        let xd = Rc::clone(&self.data);
        Tensor::record(&[self], self.shape.clone(), out, move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    for ((d, gv), &x) in sink.buf(ia).iter_mut().zip(g).zip(xd.iter()) {
                        *d += gv * gelu_grad_scalar(x);
                    }
                }
            })
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return dim_err(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            ));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .map(|k| self.data[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (self.data[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let yd = Rc::new(out.clone());
        Ok(Tensor::record(&[self], self.shape.clone(), out, move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                let Some(ia) = ia else { return };
                let dx = sink.buf(ia);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] += yd[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            })
        }))
    }

    /// Layer normalization over the last axis with per-channel gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = *self.shape.last().unwrap_or(&0);
        if n == 0 {
            return dim_err(format!("layer_norm over empty last axis {:?}", self.shape));
        }
        if gain.shape != [n] || bias.shape != [n] {
            return dim_err(format!(
                "layer_norm gain {:?} / bias {:?} do not match last axis {n}",
                gain.shape, bias.shape
            ));
        }
        let rows = self.numel() / n;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let x = &self.data[r * n..(r + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let iv = 1.0 / (var + eps).sqrt();
            inv[r] = iv;
            for k in 0..n {
                let h = (x[k] - mean) * iv;
                xhat[r * n + k] = h;
                out[r * n + k] = h * gain.data[k] + bias.data[k];
            }
        }
        let gd = Rc::clone(&gain.data);
        Ok(Tensor::record(&[self, gain, bias], self.shape.clone(), out, move |ids| {
            let (ix, ig, ib) = (ids[0], ids[1], ids[2]);
            Box::new(move |g, sink| {
                if let Some(ix) = ix {
                    let dx = sink.buf(ix);
                    let nf = n as f64;
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..n {
                            let dh = gr[k] * gd[k];
                            s1 += dh;
                            s2 += dh * hr[k];
                        }
                        for k in 0..n {
                            let dh = gr[k] * gd[k];
                            dx[r * n + k] += inv[r] / nf * (nf * dh - s1 - hr[k] * s2);
                        }
                    }
                }
                if let Some(ig) = ig {
                    let dg = sink.buf(ig);
                    for r in 0..rows {
                        for k in 0..n {
                            dg[k] += g[r * n + k] * xhat[r * n + k];
                        }
                    }
                }
                if let Some(ib) = ib {
                    let db = sink.buf(ib);
                    for r in 0..rows {
                        for k in 0..n {
                            db[k] += g[r * n + k];
                        }
                    }
                }
            })
        }))
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return dim_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            ));
        }
        // Values are shared; only the node differs.
        let node = self.node.as_ref().map(|_| ());
        if node.is_none() {
            return Ok(Tensor {
                data: Rc::clone(&self.data),
                shape: shape.to_vec(),
                node: None,
            });
        }
        Ok(Tensor::record(&[self], shape.to_vec(), self.data.to_vec(), |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    sink.add(ia, g);
                }
            })
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let out = permute_data(&self.data, &self.shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let back_shape = out_shape.clone();
        Ok(Tensor::record(&[self], out_shape, out, move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    let gi = permute_data(g, &back_shape, &inverse);
                    sink.add(ia, &gi);
                }
            })
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {:?}", self.shape));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return dim_err(format!(
                "slice [{start}, {end}) on axis {axis} out of range for {:?}",
                self.shape
            ));
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Tensor::record(&[self], shape, out, move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                let Some(ia) = ia else { return };
                let dx = sink.buf(ia);
                for o in 0..outer {
                    let base = o * len * inner;
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    for (d, v) in dx[base + start * inner..base + end * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            })
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return usage_err("concat of zero tensors");
        };
        if axis >= first.rank() {
            return dim_err(format!("concat axis {axis} out of range for {:?}", first.shape));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!(
                    "concat shape mismatch on axis {axis}: {:?} vs {:?}",
                    p.shape, first.shape
                ));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::record(parts, shape, out, move |ids| {
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (k, &w) in widths.iter().enumerate() {
                    if let Some(id) = ids[k] {
                        let dx = sink.buf(id);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            for (d, v) in dx[o * w * inner..(o + 1) * w * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            })
        }))
    }

    /// Rows of a `(vocab, width)` table selected by `indices`, shape
    /// `(indices.len(), width)`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return dim_err(format!("gather_rows needs a 2-d table, got {:?}", self.shape));
        }
        let (rows, width) = (self.shape[0], self.shape[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return usage_err(format!("row index {bad} out of range for table of {rows} rows"));
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::record(&[self], vec![indices.len(), width], out, move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                let Some(ia) = ia else { return };
                let dt = sink.buf(ia);
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..width {
                        dt[i * width + k] += g[r * width + k];
                    }
                }
            })
        }))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data.iter().sum();
        let n = self.numel();
        Tensor::record(&[self], vec![], vec![s], move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    let gv = g[0];
                    for d in sink.buf(ia).iter_mut().take(n) {
                        *d += gv;
                    }
                }
            })
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Adds a constant attention bias to scores of shape `(B, h, Lq, Lk)`.
    pub fn add_mask_bias(&self, bias: &MaskBias) -> Result<Tensor> {
        if self.rank() != 4
            || self.shape[2] != bias.q_len
            || self.shape[3] != bias.k_len
            || (bias.batch != 1 && bias.batch != self.shape[0])
        {
            return dim_err(format!(
                "mask bias ({}, {}, {}) does not fit scores {:?}",
                bias.batch, bias.q_len, bias.k_len, self.shape
            ));
        }
        let (bsz, heads) = (self.shape[0], self.shape[1]);
        let plane = bias.q_len * bias.k_len;
        let mut out = self.data.to_vec();
        for b in 0..bsz {
            let src = if bias.batch == 1 { 0 } else { b };
            let bp = &bias.data[src * plane..(src + 1) * plane];
            for h in 0..heads {
                let o = &mut out[(b * heads + h) * plane..(b * heads + h + 1) * plane];
                for (v, m) in o.iter_mut().zip(bp) {
                    *v += m;
                }
            }
        }
        Ok(Tensor::record(&[self], self.shape.clone(), out, |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    sink.add(ia, g);
                }
            })
        }))
    }

    /// Mean negative log-likelihood of `targets` under softmax over the last
    /// axis. Rows whose target is `None` are ignored; with no counted rows the
    /// loss is zero.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Tensor> {
        let v = *self.shape.last().unwrap_or(&0);
        if v == 0 || self.numel() / v != targets.len() {
            return dim_err(format!(
                "cross_entropy logits {:?} vs {} targets",
                self.shape,
                targets.len()
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return usage_err(format!("target {bad} outside vocabulary of {v}"));
        }
        let count = targets.iter().flatten().count();
        let denom = count.max(1) as f64;
        let mut probs = vec![0.0; self.numel()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &self.data[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                s += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= s;
            }
            if let Some(t) = t {
                total += max + s.ln() - row[*t];
            }
        }
        let tg = targets.to_vec();
        Ok(Tensor::record(&[self], vec![], vec![total / denom], move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                let Some(ia) = ia else { return };
                let dx = sink.buf(ia);
                let scale = g[0] / denom;
                for (r, t) in tg.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for k in 0..v {
                        let onehot = if k == *t { 1.0 } else { 0.0 };
                        dx[r * v + k] += scale * (probs[r * v + k] - onehot);
                    }
                }
            })
        }))
    }

    /// Weighted mean squared error against constant targets:
    /// `sum w (x - y)^2 / sum w`.
    pub fn mse(&self, target: &[f64], weights: Option<&[f64]>) -> Result<Tensor> {
        if target.len() != self.numel() || weights.is_some_and(|w| w.len() != self.numel()) {
            return dim_err(format!(
                "mse target/weights do not match {:?}",
                self.shape
            ));
        }
        let w: Vec<f64> = weights.map_or_else(|| vec![1.0; self.numel()], <[f64]>::to_vec);
        let wsum: f64 = w.iter().sum();
        let denom = if wsum > 0.0 { wsum } else { 1.0 };
        let diff: Vec<f64> = self.data.iter().zip(target).map(|(x, y)| x - y).collect();
        let loss = diff.iter().zip(&w).map(|(d, wi)| wi * d * d).sum::<f64>() / denom;
        Ok(Tensor::record(&[self], vec![], vec![loss], move |ids| {
            let ia = ids[0];
            Box::new(move |g, sink| {
                if let Some(ia) = ia {
                    for ((d, df), wi) in sink.buf(ia).iter_mut().zip(&diff).zip(&w) {
                        *d += g[0] * 2.0 * wi * df / denom;
                    }
                }
            })
        }))
    }
}
