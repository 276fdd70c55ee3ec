use super::params::{Init, ParamId, Session};
use crate::error::{usage_err, Result};
use crate::tensor::Tensor;

/// Learned positions factorized as a group table `(t, c)` plus a
/// within-group table `(n, c)`. Both start at zero.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub group: ParamId,
    pub within: ParamId,
    pub groups: usize,
    pub group_size: usize,
    pub dim: usize,
}

impl PositionalEncoding {
    pub fn new(init: &mut Init<'_>, name: &str, groups: usize, group_size: usize, dim: usize) -> Result<Self> {
        if groups == 0 || group_size == 0 || dim == 0 {
            return usage_err(format!(
                "positional encoding extents must be positive, got ({groups}, {group_size}, {dim})"
            ));
        }
        let mut s = init.scope(name);
        Ok(Self {
            group: s.constant("group", &[groups, dim], 0.0),
            within: s.constant("within", &[group_size, dim], 0.0),
            groups,
            group_size,
            dim,
        })
    }

    pub fn param_count(groups: usize, group_size: usize, dim: usize) -> usize {
        (groups + group_size) * dim
    }

    /// Encodings for explicit `(group, within)` coordinates, shape `(len, c)`.
    pub fn at(&self, s: &Session<'_>, group_idx: &[usize], within_idx: &[usize]) -> Result<Tensor> {
        let g = s.param(self.group).gather_rows(group_idx)?;
        let w = s.param(self.within).gather_rows(within_idx)?;
        g.add(&w)
    }

    /// The full `(t, n, c)` table in group-major order.
    pub fn table(&self, s: &Session<'_>) -> Result<Tensor> {
        let (t, n) = (self.groups, self.group_size);
        let gi: Vec<usize> = (0..t * n).map(|i| i / n).collect();
        let wi: Vec<usize> = (0..t * n).map(|i| i % n).collect();
        self.at(s, &gi, &wi)?.reshape(&[t, n, self.dim])
    }
}
