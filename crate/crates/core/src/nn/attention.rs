use super::layers::Linear;
use super::mask::{build_bias, AttentionMask};
use super::params::{Init, Session};
use crate::error::{dim_err, usage_err, Result};
use crate::tensor::opcount::{self, Phase};
use crate::tensor::{MaskBias, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Width of the query stream and of the output.
    pub model_dim: usize,
    /// Width of the key/value source; projected to `model_dim`.
    pub kv_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, kv_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0 {
            return usage_err(format!(
                "model_dim {model_dim} must be a positive multiple of num_heads {num_heads}"
            ));
        }
        Ok(Self {
            model_dim,
            kv_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Scaled dot-product attention with `num_heads` heads and an output
/// projection. `forward` returns the delta; the caller adds the residual.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: AttentionConfig) -> Self {
        let mut s = init.scope(name);
        let (d, dkv) = (cfg.model_dim, cfg.kv_dim);
        Self {
            cfg,
            q: Linear::new(&mut s, "q", d, d),
            k: Linear::new(&mut s, "k", dkv, d),
            v: Linear::new(&mut s, "v", dkv, d),
            o: Linear::zeroed(&mut s, "o", d, d),
        }
    }

    pub fn param_count(cfg: &AttentionConfig) -> usize {
        let (d, dkv) = (cfg.model_dim, cfg.kv_dim);
        2 * Linear::param_count(d, d) + 2 * Linear::param_count(dkv, d)
    }

    pub fn project_q(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let _phase = opcount::phase(Phase::Projection);
        self.q.forward(s, x)
    }

    pub fn project_kv(&self, s: &Session<'_>, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let _phase = opcount::phase(Phase::Projection);
        Ok((self.k.forward(s, y)?, self.v.forward(s, y)?))
    }

    /// Attention over already projected `q (B, Lq, D)`, `k`, `v (B, Lk, D)`,
    /// followed by the output projection.
    pub fn attend(
        &self,
        s: &Session<'_>,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: Option<&MaskBias>,
    ) -> Result<Tensor> {
        let d = self.cfg.model_dim;
        if q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() {
            return dim_err(format!(
                "attention expects (B, L, D) tensors, got q {:?} k {:?} v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ));
        }
        let (b, lq, lk) = (q.shape()[0], q.shape()[1], k.shape()[1]);
        if k.shape()[0] != b || q.shape()[2] != d || k.shape()[2] != d {
            return dim_err(format!(
                "attention shape mismatch: q {:?} k {:?} with model_dim {d}",
                q.shape(),
                k.shape()
            ));
        }
        let (h, dh) = (self.cfg.num_heads, self.cfg.head_dim());
        let ctx = {
            let _phase = opcount::phase(Phase::AttentionCore);
            let qh = q.reshape(&[b, lq, h, dh])?.permute(&[0, 2, 1, 3])?;
            let kt = k.reshape(&[b, lk, h, dh])?.permute(&[0, 2, 3, 1])?;
            let vh = v.reshape(&[b, lk, h, dh])?.permute(&[0, 2, 1, 3])?;
            let mut scores = qh.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt());
            if let Some(bias) = bias {
                scores = scores.add_mask_bias(bias)?;
            }
            opcount::add_scores((b * h * lq * lk) as u64);
            let probs = scores.softmax(3)?;
            probs
                .matmul(&vh)?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, lq, d])?
        };
        let _phase = opcount::phase(Phase::Projection);
        self.o.forward(s, &ctx)
    }

    /// Multi-head attention of `q_in (B, Lq, model_dim)` over
    /// `kv_in (B, Lk, kv_dim)`. `key_valid`, when given, flags usable keys per
    /// batch row (`B * Lk` entries).
    pub fn forward(
        &self,
        s: &Session<'_>,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&AttentionMask>,
        key_valid: Option<&[bool]>,
    ) -> Result<Tensor> {
        if q_in.rank() != 3 || kv_in.rank() != 3 || q_in.shape()[0] != kv_in.shape()[0] {
            return dim_err(format!(
                "attention inputs must be (B, L, dim) with equal B, got {:?} and {:?}",
                q_in.shape(),
                kv_in.shape()
            ));
        }
        if q_in.shape()[2] != self.cfg.model_dim || kv_in.shape()[2] != self.cfg.kv_dim {
            return dim_err(format!(
                "attention expects dims ({}, {}), got {:?} and {:?}",
                self.cfg.model_dim,
                self.cfg.kv_dim,
                q_in.shape(),
                kv_in.shape()
            ));
        }
        let (b, lq, lk) = (q_in.shape()[0], q_in.shape()[1], kv_in.shape()[1]);
        let bias = build_bias(mask, key_valid, b, lq, lk)?;
        let q = self.project_q(s, q_in)?;
        let (k, v) = self.project_kv(s, kv_in)?;
        self.attend(s, &q, &k, &v, bias.as_ref())
    }
}
