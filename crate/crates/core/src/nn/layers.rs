use super::params::{Init, ParamId, Session};
use crate::error::Result;
use crate::tensor::opcount::{self, Phase};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Affine map `x W + b` over the last axis, `W` of shape `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            w: s.normal("w", &[in_dim, out_dim], INIT_STD),
            b: s.constant("b", &[out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    /// Zero weight and bias, used for residual output projections.
    pub fn zeroed(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            w: s.constant("w", &[in_dim, out_dim], 0.0),
            b: s.constant("b", &[out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        x.matmul(&s.param(self.w))?.add(&s.param(self.b))
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            gain: s.constant("gain", &[dim], 1.0),
            bias: s.constant("bias", &[dim], 0.0),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&s.param(self.gain), &s.param(self.bias), LN_EPS)
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

/// Position-wise two-layer network with GELU, hidden width
/// `expansion * dim`. Returns the residual delta.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, expansion: usize) -> Self {
        let mut s = init.scope(name);
        let hidden = dim * expansion;
        Self {
            up: Linear::new(&mut s, "up", dim, hidden),
            down: Linear::zeroed(&mut s, "down", hidden, dim),
        }
    }

    pub fn forward(&self, s: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let _phase = opcount::phase(Phase::Ffn);
        let h = self.up.forward(s, x)?.gelu();
        self.down.forward(s, &h)
    }

    pub fn param_count(dim: usize, expansion: usize) -> usize {
        Linear::param_count(dim, dim * expansion) + Linear::param_count(dim * expansion, dim)
    }
}
