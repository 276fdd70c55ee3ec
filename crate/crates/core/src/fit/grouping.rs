use crate::error::{dim_err, usage_err, Result};
use crate::tensor::Tensor;

/// Placement of a flat sequence into `t` groups of `n` slots. Groups start
/// every `n - p` positions; with `p > 0` the first `p` slots of each later
/// group repeat the tail of the previous one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub len: usize,
    pub groups: usize,
    pub group_size: usize,
    pub prefix: usize,
    /// Flat index held by each slot, `None` for padding; `t * n` entries.
    pub slots: Vec<Option<usize>>,
}

impl GroupLayout {
    /// Contiguous split into `t` groups; `n = ceil(len / t)`.
    pub fn contiguous(len: usize, t: usize, padding: bool) -> Result<Self> {
        if len == 0 || t == 0 {
            return usage_err(format!("cannot group {len} tokens into {t} groups"));
        }
        if len % t != 0 && !padding {
            return usage_err(format!(
                "{t} groups do not divide length {len} and padding is disabled"
            ));
        }
        let n = len.div_ceil(t);
        Ok(Self::build(len, t, n, 0))
    }

    /// Groups of `n` slots with `p` prefix slots, as many as needed to cover
    /// `len` tokens.
    pub fn overlapped(len: usize, n: usize, p: usize, padding: bool) -> Result<Self> {
        if p >= n {
            return usage_err(format!("prefix overlap {p} must be smaller than group size {n}"));
        }
        if len == 0 {
            return usage_err("cannot group an empty sequence");
        }
        let stride = n - p;
        let t = if len <= n { 1 } else { 1 + (len - n).div_ceil(stride) };
        let covered = (t - 1) * stride + n;
        if covered != len && !padding {
            return usage_err(format!(
                "length {len} does not fill {t} groups of {n} with overlap {p} and padding is disabled"
            ));
        }
        Ok(Self::build(len, t, n, p))
    }

    fn build(len: usize, t: usize, n: usize, p: usize) -> Self {
        let stride = n - p;
        let slots = (0..t * n)
            .map(|s| {
                let q = (s / n) * stride + s % n;
                (q < len).then_some(q)
            })
            .collect();
        Self {
            len,
            groups: t,
            group_size: n,
            prefix: p,
            slots,
        }
    }

    pub fn is_prefix(&self, slot: usize) -> bool {
        slot / self.group_size > 0 && slot % self.group_size < self.prefix
    }

    /// Prefix flags for every slot.
    pub fn prefix_mask(&self) -> Vec<bool> {
        (0..self.slots.len()).map(|s| self.is_prefix(s)).collect()
    }

    pub fn valid(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// The slot whose output predicts from flat position `q`: its first
    /// non-prefix copy.
    pub fn slot_of(&self, q: usize) -> Option<usize> {
        (0..self.slots.len()).find(|&s| self.slots[s] == Some(q) && !self.is_prefix(s))
    }

    /// Positional coordinates `(group, within)` of a slot. Prefix slots reuse
    /// the coordinates of the slot they were copied from.
    pub fn coords(&self, slot: usize) -> (usize, usize) {
        position_coords(slot / self.group_size, slot % self.group_size, self.group_size, self.prefix)
    }

    /// Arranges per-position values into slot order.
    pub fn arrange<T: Clone>(&self, flat: &[T], pad: T) -> Vec<T> {
        self.slots
            .iter()
            .map(|s| s.map_or_else(|| pad.clone(), |q| flat[q].clone()))
            .collect()
    }
}

/// Positional coordinates of within-group index `j` of group `g`.
pub fn position_coords(g: usize, j: usize, n: usize, p: usize) -> (usize, usize) {
    if g > 0 && j < p {
        (g - 1, n - p + j)
    } else {
        (g, j)
    }
}

/// Data tokens arranged as `(b, t, n, c)`, with per-slot validity when the
/// input was padded and the prefix width of overlapped groups.
#[derive(Clone, Debug)]
pub struct GroupedTokens {
    pub values: Tensor,
    pub valid: Option<Vec<bool>>,
    pub prefix: usize,
}

impl GroupedTokens {
    pub fn new(values: Tensor, valid: Option<Vec<bool>>, prefix: usize) -> Result<Self> {
        if values.rank() != 4 {
            return dim_err(format!("grouped tokens must be (b, t, n, c), got {:?}", values.shape()));
        }
        let slots = values.shape()[..3].iter().product::<usize>();
        if valid.as_ref().is_some_and(|v| v.len() != slots) {
            return dim_err(format!(
                "validity mask has {} entries for {slots} slots",
                valid.as_ref().map_or(0, Vec::len)
            ));
        }
        Ok(Self {
            values,
            valid,
            prefix,
        })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn groups(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn group_size(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[3]
    }
}

pub(crate) fn arrange_tensor(x: &Tensor, layout: &GroupLayout) -> Result<GroupedTokens> {
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let table = Tensor::concat(&[&x.reshape(&[b * l, c])?, &Tensor::zeros(&[1, c])], 0)?;
    let mut idx = Vec::with_capacity(b * layout.slots.len());
    for bi in 0..b {
        idx.extend(layout.slots.iter().map(|s| s.map_or(b * l, |q| bi * l + q)));
    }
    let values = table
        .gather_rows(&idx)?
        .reshape(&[b, layout.groups, layout.group_size, c])?;
    let padded = layout.slots.iter().any(Option::is_none);
    let valid = padded.then(|| {
        let v = layout.valid();
        v.iter().copied().cycle().take(b * v.len()).collect()
    });
    GroupedTokens::new(values, valid, layout.prefix)
}

fn check_rank3(x: &Tensor) -> Result<()> {
    if x.rank() != 3 {
        return dim_err(format!("expected (b, L, c) input, got {:?}", x.shape()));
    }
    Ok(())
}

/// Contiguous split of `x (b, L, c)` into `t` groups; group `g` holds flat
/// positions `[g n, (g + 1) n)`. Padding slots are zero and flagged invalid.
pub fn group_tokens(x: &Tensor, t: usize, padding: bool) -> Result<GroupedTokens> {
    check_rank3(x)?;
    let layout = GroupLayout::contiguous(x.shape()[1], t, padding)?;
    arrange_tensor(x, &layout)
}

/// Overlapped groups of `n` slots whose first `p` slots (for groups after
/// the first) repeat the previous group's last `p` tokens.
pub fn build_overlapped_groups(x: &Tensor, n: usize, p: usize, padding: bool) -> Result<(GroupedTokens, Vec<bool>)> {
    check_rank3(x)?;
    let layout = GroupLayout::overlapped(x.shape()[1], n, p, padding)?;
    let mask = layout.prefix_mask();
    Ok((arrange_tensor(x, &layout)?, mask))
}
