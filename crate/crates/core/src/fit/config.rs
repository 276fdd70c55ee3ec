use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Encoder,
    Autoregressive,
}

/// How raw inputs enter the data stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Discrete ids embedded through a `(input_dim + 1, c)` table whose last
    /// row is the pad token.
    Tokens,
    /// Real vectors of width `input_dim` mapped by an affine projection.
    Features,
}

/// Deliberate faults and ablations used by the verification suite. Never
/// read from or written to config files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Danger {
    pub unshifted_latents: bool,
    pub no_causal_mask: bool,
    pub no_group_causal_mask: bool,
    pub disable_cross_attention: bool,
}

impl Danger {
    pub const NAMES: [&'static str; 4] = [
        "unshifted_latents",
        "no_causal_mask",
        "no_group_causal_mask",
        "disable_cross_attention",
    ];

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "unshifted_latents" => self.unshifted_latents = true,
            "no_causal_mask" => self.no_causal_mask = true,
            "no_group_causal_mask" => self.no_group_causal_mask = true,
            "disable_cross_attention" => self.disable_cross_attention = true,
            other => {
                return usage_err(format!(
                    "unknown fault injection `{other}`; expected one of {}",
                    Self::NAMES.join(", ")
                ))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Interleave pattern such as `"L4,G2,L4,G2,L4"`.
    pub pattern: String,
    pub data_dim: usize,
    pub latent_dim: usize,
    /// Maximum number of groups `t`.
    pub groups: usize,
    pub group_size: usize,
    /// Latent tokens per group `m`.
    pub latents: usize,
    pub local_heads: usize,
    pub global_heads: usize,
    pub cross_heads: usize,
    pub local_self_attention: bool,
    pub mode: Mode,
    pub prefix_overlap: usize,
    pub ffn_expansion: usize,
    pub cross_ffn: bool,
    pub input: InputKind,
    /// Vocabulary size for token inputs, feature width otherwise.
    pub input_dim: usize,
    pub output_dim: usize,
    /// Right-pad inputs that do not fill a whole number of groups.
    pub padding: bool,
    pub seed: u64,
    #[serde(skip)]
    pub danger: Danger,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            pattern: "L2,G1,L2".into(),
            data_dim: 32,
            latent_dim: 32,
            groups: 4,
            group_size: 8,
            latents: 2,
            local_heads: 2,
            global_heads: 2,
            cross_heads: 2,
            local_self_attention: true,
            mode: Mode::Autoregressive,
            prefix_overlap: 0,
            ffn_expansion: 4,
            cross_ffn: true,
            input: InputKind::Tokens,
            input_dim: 16,
            output_dim: 16,
            padding: true,
            seed: 0,
            danger: Danger::default(),
        }
    }
}

/// Parsed interleave pattern: `blocks[i] = (local layers, global layers)`,
/// followed by a trailing local stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub blocks: Vec<(usize, usize)>,
    pub final_local: usize,
}

impl Pattern {
    pub fn parse(s: &str) -> Result<Self> {
        let items: Vec<(char, usize)> = s
            .split(',')
            .map(|raw| {
                let item = raw.trim();
                let mut chars = item.chars();
                let kind = chars.next().map(|c| c.to_ascii_uppercase());
                let count = chars.as_str().parse::<usize>();
                match (kind, count) {
                    (Some(k @ ('L' | 'G')), Ok(n)) => Ok((k, n)),
                    _ => usage_err(format!(
                        "bad pattern item `{item}` in `{s}`; expected L<k> or G<k>"
                    )),
                }
            })
            .collect::<Result<_>>()?;
        if items.len() % 2 == 0 || items.first().map(|i| i.0) != Some('L') {
            return usage_err(format!(
                "pattern `{s}` must alternate local and global stacks, starting and ending with L"
            ));
        }
        for (i, (kind, _)) in items.iter().enumerate() {
            let expected = if i % 2 == 0 { 'L' } else { 'G' };
            if *kind != expected {
                return usage_err(format!(
                    "pattern `{s}` must alternate local and global stacks, starting and ending with L"
                ));
            }
        }
        let blocks = items.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0].1, c[1].1)).collect();
        Ok(Self {
            blocks,
            final_local: items.last().map(|i| i.1).unwrap_or(0),
        })
    }

    pub fn render(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for (l, g) in &self.blocks {
            parts.push(format!("L{l}"));
            parts.push(format!("G{g}"));
        }
        parts.push(format!("L{}", self.final_local));
        parts.join(",")
    }
}

impl FitConfig {
    pub fn pattern(&self) -> Result<Pattern> {
        Pattern::parse(&self.pattern)
    }

    /// Longest flat sequence the model accepts.
    pub fn max_len(&self) -> usize {
        let stride = self.group_size - self.prefix_overlap;
        (self.groups - 1) * stride + self.group_size
    }

    pub fn validate(&self) -> Result<Pattern> {
        let pattern = self.pattern()?;
        let positive = [
            ("data_dim", self.data_dim),
            ("latent_dim", self.latent_dim),
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("latents", self.latents),
            ("local_heads", self.local_heads),
            ("global_heads", self.global_heads),
            ("cross_heads", self.cross_heads),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return usage_err(format!("{name} must be positive"));
            }
        }
        for (name, dim, heads) in [
            ("local_heads", self.data_dim, self.local_heads),
            ("global_heads", self.latent_dim, self.global_heads),
            ("cross_heads", self.data_dim, self.cross_heads),
            ("cross_heads", self.latent_dim, self.cross_heads),
        ] {
            if dim % heads != 0 {
                return usage_err(format!("{name} = {heads} does not divide width {dim}"));
            }
        }
        if self.prefix_overlap >= self.group_size {
            return usage_err(format!(
                "prefix_overlap {} must be smaller than group_size {}",
                self.prefix_overlap, self.group_size
            ));
        }
        if self.prefix_overlap > 0 && self.mode == Mode::Encoder {
            return usage_err("prefix_overlap applies to autoregressive mode only");
        }
        if self.mode == Mode::Autoregressive && self.input != InputKind::Tokens {
            return usage_err("autoregressive mode needs token inputs");
        }
        Ok(pattern)
    }
}
