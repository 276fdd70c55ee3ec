use crate::error::{usage_err, Result};
use crate::tensor::MaskBias;

/// Additive logit used for forbidden query/key pairs. Finite, so fully
/// saturated rows can never produce `inf - inf`.
pub const MASKED_LOGIT: f64 = -1e30;

/// Boolean attention pattern; `allowed(i, j)` lets query `i` read key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Fails when some query row allows no key.
    pub fn new(q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != q_len * k_len {
            return usage_err(format!(
                "mask of {q_len}x{k_len} given {} entries",
                allowed.len()
            ));
        }
        if let Some(row) = (0..q_len).find(|&i| !allowed[i * k_len..(i + 1) * k_len].contains(&true)) {
            return usage_err(format!("mask row {row} forbids every key"));
        }
        Ok(Self {
            q_len,
            k_len,
            allowed,
        })
    }

    fn from_fn(q_len: usize, k_len: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..q_len)
            .flat_map(|i| (0..k_len).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self::new(q_len, k_len, allowed)
    }

    pub fn full(q_len: usize, k_len: usize) -> Self {
        Self {
            q_len,
            k_len,
            allowed: vec![true; q_len * k_len],
        }
    }

    /// Lower-triangular, diagonal included.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i).expect("causal rows always include the diagonal")
    }

    /// Mask over `t * m` latents: full visibility inside a group, causal
    /// across groups.
    pub fn group_causal(t: usize, m: usize) -> Self {
        Self::from_fn(t * m, t * m, |i, j| j / m <= i / m)
            .expect("group-causal rows always include their own group")
    }

    /// Tokens of `t` groups of `n` see only their own group.
    pub fn block_diagonal(t: usize, n: usize) -> Self {
        Self::from_fn(t * n, t * n, |i, j| j / n == i / n)
            .expect("block-diagonal rows always include their own block")
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.k_len + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.allowed[i * self.k_len..(i + 1) * self.k_len]
            .iter()
            .filter(|a| **a)
            .count()
    }
}

/// Combines an optional pattern with optional per-row key validity
/// (`key_valid[b * k_len + j]`) into an additive bias. Query rows that
/// would see no valid key fall back to the pattern alone; such rows belong
/// to padding and their outputs are discarded.
pub(crate) fn build_bias(
    mask: Option<&AttentionMask>,
    key_valid: Option<&[bool]>,
    batch: usize,
    q_len: usize,
    k_len: usize,
) -> Result<Option<MaskBias>> {
    if let Some(m) = mask {
        if m.q_len != q_len || m.k_len != k_len {
            return usage_err(format!(
                "mask is {}x{} but attention is {q_len}x{k_len}",
                m.q_len, m.k_len
            ));
        }
    }
    let pattern = |i: usize, j: usize| mask.is_none_or(|m| m.allowed(i, j));
    match key_valid {
        None => Ok(mask.map(|m| {
            let data = m
                .allowed
                .iter()
                .map(|&a| if a { 0.0 } else { MASKED_LOGIT })
                .collect();
            MaskBias::new(1, q_len, k_len, data).expect("sizes checked")
        })),
        Some(valid) => {
            if valid.len() != batch * k_len {
                return usage_err(format!(
                    "key validity has {} entries, expected {}",
                    valid.len(),
                    batch * k_len
                ));
            }
            let mut data = Vec::with_capacity(batch * q_len * k_len);
            for b in 0..batch {
                let v = &valid[b * k_len..(b + 1) * k_len];
                for i in 0..q_len {
                    let any = (0..k_len).any(|j| pattern(i, j) && v[j]);
                    data.extend((0..k_len).map(|j| {
                        let ok = pattern(i, j) && (v[j] || !any);
                        if ok {
                            0.0
                        } else {
                            MASKED_LOGIT
                        }
                    }));
                }
            }
            Ok(Some(MaskBias::new(batch, q_len, k_len, data)?))
        }
    }
}
