use super::attention::{AttentionConfig, MultiHeadAttention};
use super::layers::{Ffn, Norm};
use super::mask::{build_bias, AttentionMask};
use super::params::{Init, Session};
use crate::error::{usage_err, Result};
use crate::tensor::Tensor;

/// One pre-norm transformer layer. `attn` is absent for layers built
/// without self-attention.
#[derive(Clone, Debug)]
pub struct Layer {
    pub attn_norm: Option<Norm>,
    pub attn: Option<MultiHeadAttention>,
    pub ffn_norm: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackSpec {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_expansion: usize,
    pub self_attention: bool,
}

impl StackSpec {
    pub fn param_count(&self) -> usize {
        let attn = if self.self_attention {
            let cfg = AttentionConfig {
                model_dim: self.dim,
                kv_dim: self.dim,
                num_heads: self.heads,
            };
            Norm::param_count(self.dim) + MultiHeadAttention::param_count(&cfg)
        } else {
            0
        };
        self.layers * (attn + Norm::param_count(self.dim) + Ffn::param_count(self.dim, self.ffn_expansion))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackOptions {
    pub use_attn: bool,
    pub use_ffn: bool,
    /// Number of leading layers to run; all when `None`.
    pub layers: Option<usize>,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            use_attn: true,
            use_ffn: true,
            layers: None,
        }
    }
}

/// `K` pre-norm layers: `x += attn(norm(x))`, then `x += ffn(norm(x))`.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub spec: StackSpec,
    pub layers: Vec<Layer>,
}

impl TransformerStack {
    pub fn new(init: &mut Init<'_>, name: &str, spec: StackSpec) -> Result<Self> {
        let cfg = AttentionConfig::new(spec.dim, spec.dim, spec.heads)?;
        let mut s = init.scope(name);
        let layers = (0..spec.layers)
            .map(|k| {
                let mut l = s.scope(&k.to_string());
                let (attn_norm, attn) = if spec.self_attention {
                    (
                        Some(Norm::new(&mut l, "attn_norm", spec.dim)),
                        Some(MultiHeadAttention::new(&mut l, "attn", cfg)),
                    )
                } else {
                    (None, None)
                };
                Layer {
                    attn_norm,
                    attn,
                    ffn_norm: Norm::new(&mut l, "ffn_norm", spec.dim),
                    ffn: Ffn::new(&mut l, "ffn", spec.dim, spec.ffn_expansion),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs the stack on `x (B, L, dim)`.
    pub fn forward(
        &self,
        s: &Session<'_>,
        x: &Tensor,
        mask: Option<&AttentionMask>,
        key_valid: Option<&[bool]>,
        opts: StackOptions,
    ) -> Result<Tensor> {
        let k = opts.layers.unwrap_or(self.layers.len());
        if k > self.layers.len() {
            return usage_err(format!(
                "requested {k} layers from a stack of {}",
                self.layers.len()
            ));
        }
        if k == 0 || (!opts.use_attn && !opts.use_ffn) {
            return Ok(x.clone());
        }
        let bias = if opts.use_attn && self.spec.self_attention {
            let (b, l) = (x.shape()[0], x.shape()[1]);
            build_bias(mask, key_valid, b, l, l)?
        } else {
            None
        };
        let mut x = x.clone();
        for layer in &self.layers[..k] {
            if opts.use_attn {
                if let (Some(norm), Some(attn)) = (&layer.attn_norm, &layer.attn) {
                    let h = norm.forward(s, &x)?;
                    let q = attn.project_q(s, &h)?;
                    let (kk, v) = attn.project_kv(s, &h)?;
                    x = x.add(&attn.attend(s, &q, &kk, &v, bias.as_ref())?)?;
                }
            }
            if opts.use_ffn {
                let h = layer.ffn_norm.forward(s, &x)?;
                x = x.add(&layer.ffn.forward(s, &h)?)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossSpec {
    pub dim: usize,
    pub source_dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub ffn: bool,
}

impl CrossSpec {
    pub fn param_count(&self) -> usize {
        let cfg = AttentionConfig {
            model_dim: self.dim,
            kv_dim: self.source_dim,
            num_heads: self.heads,
        };
        let ffn = if self.ffn {
            Norm::param_count(self.dim) + Ffn::param_count(self.dim, self.ffn_expansion)
        } else {
            0
        };
        Norm::param_count(self.dim)
            + Norm::param_count(self.source_dim)
            + MultiHeadAttention::param_count(&cfg)
            + ffn
    }
}

/// Residual cross-attention of a query stream `x` reading a source `y`,
/// optionally followed by a residual FFN on `x`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub spec: CrossSpec,
    pub q_norm: Norm,
    pub kv_norm: Norm,
    pub attn: MultiHeadAttention,
    pub ffn: Option<(Norm, Ffn)>,
}

impl CrossAttention {
    pub fn new(init: &mut Init<'_>, name: &str, spec: CrossSpec) -> Result<Self> {
        let cfg = AttentionConfig::new(spec.dim, spec.source_dim, spec.heads)?;
        let mut s = init.scope(name);
        Ok(Self {
            spec,
            q_norm: Norm::new(&mut s, "q_norm", spec.dim),
            kv_norm: Norm::new(&mut s, "kv_norm", spec.source_dim),
            attn: MultiHeadAttention::new(&mut s, "attn", cfg),
            ffn: spec.ffn.then(|| {
                (
                    Norm::new(&mut s, "ffn_norm", spec.dim),
                    Ffn::new(&mut s, "ffn", spec.dim, spec.ffn_expansion),
                )
            }),
        })
    }

    /// Normalized keys and values of a source, reusable across queries.
    pub fn source_kv(&self, s: &Session<'_>, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let hy = self.kv_norm.forward(s, y)?;
        self.attn.project_kv(s, &hy)
    }

    /// Applies the block to `x` given projected source keys/values.
    pub fn forward_with_kv(
        &self,
        s: &Session<'_>,
        x: &Tensor,
        k: &Tensor,
        v: &Tensor,
        key_valid: Option<&[bool]>,
    ) -> Result<Tensor> {
        let bias = match key_valid {
            Some(_) => build_bias(None, key_valid, x.shape()[0], x.shape()[1], k.shape()[1])?,
            None => None,
        };
        let hq = self.q_norm.forward(s, x)?;
        let q = self.attn.project_q(s, &hq)?;
        let mut x = x.add(&self.attn.attend(s, &q, k, v, bias.as_ref())?)?;
        if let Some((norm, ffn)) = &self.ffn {
            let h = norm.forward(s, &x)?;
            x = x.add(&ffn.forward(s, &h)?)?;
        }
        Ok(x)
    }

    /// `x (B, Lx, dim)` reading `y (B, Ly, source_dim)`.
    pub fn forward(
        &self,
        s: &Session<'_>,
        x: &Tensor,
        y: &Tensor,
        key_valid: Option<&[bool]>,
    ) -> Result<Tensor> {
        if x.rank() != 3 || y.rank() != 3 || x.shape()[0] != y.shape()[0] {
            return crate::error::dim_err(format!(
                "cross attention needs (B, L, dim) inputs with equal B, got {:?} and {:?}",
                x.shape(),
                y.shape()
            ));
        }
        if x.shape()[2] != self.spec.dim || y.shape()[2] != self.spec.source_dim {
            return crate::error::dim_err(format!(
                "cross attention expects dims ({}, {}), got {:?} and {:?}",
                self.spec.dim,
                self.spec.source_dim,
                x.shape(),
                y.shape()
            ));
        }
        let (k, v) = self.source_kv(s, y)?;
        self.forward_with_kv(s, x, &k, &v, key_valid)
    }
}
