use super::config::Mode;
use super::grouping::GroupedTokens;
use super::model::FitModel;
use crate::error::{dim_err, usage_err, Result};
use crate::nn::Session;
use crate::tensor::Tensor;

/// Latents moved one group to the right with a zero group in front.
#[derive(Clone, Debug)]
pub struct ShiftedLatents {
    /// `(b * t, m, d)`; group 0 of every batch row is zero.
    pub shifted: Tensor,
    /// The displaced final group, `(b, 1, m, d)`.
    pub last_group: Tensor,
}

pub fn shift_latents(latents: &Tensor) -> Result<ShiftedLatents> {
    if latents.rank() != 4 || latents.shape()[1] == 0 {
        return dim_err(format!("latents must be (b, t, m, d) with t >= 1, got {:?}", latents.shape()));
    }
    let (b, t, m, d) = (latents.shape()[0], latents.shape()[1], latents.shape()[2], latents.shape()[3]);
    let last_group = latents.slice_axis(1, t - 1, t)?;
    let zeros = Tensor::zeros(&[b, 1, m, d]);
    let shifted = if t == 1 {
        zeros
    } else {
        Tensor::concat(&[&zeros, &latents.slice_axis(1, 0, t - 1)?], 1)?
    };
    Ok(ShiftedLatents {
        shifted: shifted.reshape(&[b * t, m, d])?,
        last_group,
    })
}

pub fn shift_back_latents(s: &ShiftedLatents) -> Result<Tensor> {
    let last = &s.last_group;
    if last.rank() != 4 || last.shape()[1] != 1 || s.shifted.rank() != 3 {
        return dim_err(format!(
            "inconsistent shifted latents {:?} and last group {:?}",
            s.shifted.shape(),
            last.shape()
        ));
    }
    let (b, m, d) = (last.shape()[0], last.shape()[2], last.shape()[3]);
    let rows = s.shifted.shape()[0];
    if b == 0 || rows % b != 0 || s.shifted.shape()[1..] != [m, d] {
        return dim_err(format!(
            "shifted latents {:?} do not match last group {:?}",
            s.shifted.shape(),
            last.shape()
        ));
    }
    let t = rows / b;
    if t == 1 {
        return Ok(last.clone());
    }
    let grouped = s.shifted.reshape(&[b, t, m, d])?;
    Tensor::concat(&[&grouped.slice_axis(1, 1, t)?, last], 1)
}

impl FitModel {
    /// Next-token logits `(b, t, n, vocab)` at every slot.
    pub fn fitar_forward(&self, s: &Session<'_>, x: &GroupedTokens) -> Result<Tensor> {
        if self.config.mode != Mode::Autoregressive {
            return usage_err("fitar_forward needs an autoregressive model");
        }
        let (h, _latents) = self.body(s, x, true)?;
        self.output(s, &h)
    }
}

/// Mean cross-entropy of `logits (b, t, n, V)` over slots that are neither
/// padding (`None` target) nor prefix copies in groups after the first.
pub fn ar_loss(logits: &Tensor, targets: &[Option<usize>], p: usize) -> Result<Tensor> {
    if logits.rank() != 4 {
        return dim_err(format!("logits must be (b, t, n, V), got {:?}", logits.shape()));
    }
    let n = logits.shape()[2];
    if p >= n {
        return usage_err(format!("prefix overlap {p} must be smaller than group size {n}"));
    }
    let t = logits.shape()[1];
    if targets.len() != logits.numel() / logits.shape()[3] {
        return dim_err(format!("{} targets for logits {:?}", targets.len(), logits.shape()));
    }
    let kept: Vec<Option<usize>> = targets
        .iter()
        .enumerate()
        .map(|(k, &tg)| {
            let slot = k % (t * n);
            let prefix = slot / n > 0 && slot % n < p;
            if prefix {
                None
            } else {
                tg
            }
        })
        .collect();
    logits.cross_entropy(&kept)
}
