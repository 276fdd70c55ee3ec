use super::config::{FitConfig, InputKind, Mode, Pattern};
use super::grouping::{arrange_tensor, GroupLayout, GroupedTokens};
use crate::error::{dim_err, usage_err, Result};
use crate::nn::{
    AttentionMask, CrossAttention, CrossSpec, Init, Linear, Norm, ParamId, ParamStore,
    PositionalEncoding, Session, StackOptions, StackSpec, TransformerStack, INIT_STD,
};
use crate::rng::RngStream;
use crate::tensor::opcount::{self, Component};
use crate::tensor::Tensor;

/// One local stack, latent read, global stack and latent write-back.
#[derive(Clone, Debug)]
pub struct Block {
    pub local: TransformerStack,
    pub l2x: CrossAttention,
    pub global: TransformerStack,
    pub x2l: CrossAttention,
}

#[derive(Clone, Debug)]
pub enum Embedding {
    Table(ParamId),
    Projection(Linear),
}

/// Raw model input for a batch of flat sequences of equal length.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    /// `batch * len` token ids, row-major.
    Tokens { ids: &'a [usize], batch: usize },
    /// `(b, L, input_dim)` real features.
    Features(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct FitModel {
    pub config: FitConfig,
    pub pattern: Pattern,
    pub params: ParamStore,
    pub embed: Embedding,
    pub pos: PositionalEncoding,
    pub latent_init: ParamId,
    pub latent_group: ParamId,
    pub blocks: Vec<Block>,
    pub final_local: TransformerStack,
    pub final_norm: Norm,
    pub head: Linear,
}

fn local_spec(cfg: &FitConfig, layers: usize) -> StackSpec {
    StackSpec {
        dim: cfg.data_dim,
        heads: cfg.local_heads,
        layers,
        ffn_expansion: cfg.ffn_expansion,
        self_attention: cfg.local_self_attention,
    }
}

fn global_spec(cfg: &FitConfig, layers: usize) -> StackSpec {
    StackSpec {
        dim: cfg.latent_dim,
        heads: cfg.global_heads,
        layers,
        ffn_expansion: cfg.ffn_expansion,
        self_attention: true,
    }
}

fn cross_spec(cfg: &FitConfig, dim: usize, source_dim: usize) -> CrossSpec {
    CrossSpec {
        dim,
        source_dim,
        heads: cfg.cross_heads,
        ffn_expansion: cfg.ffn_expansion,
        ffn: cfg.cross_ffn,
    }
}

/// Exact number of scalars a model built from `cfg` holds.
pub fn parameter_count(cfg: &FitConfig) -> Result<usize> {
    let pattern = cfg.validate()?;
    let (c, d) = (cfg.data_dim, cfg.latent_dim);
    let embed = match cfg.input {
        InputKind::Tokens => (cfg.input_dim + 1) * c,
        InputKind::Features => Linear::param_count(cfg.input_dim, c),
    };
    let blocks: usize = pattern
        .blocks
        .iter()
        .map(|&(l, g)| {
            local_spec(cfg, l).param_count()
                + cross_spec(cfg, d, c).param_count()
                + global_spec(cfg, g).param_count()
                + cross_spec(cfg, c, d).param_count()
        })
        .sum();
    Ok(embed
        + PositionalEncoding::param_count(cfg.groups, cfg.group_size, c)
        + (cfg.latents + cfg.groups) * d
        + blocks
        + local_spec(cfg, pattern.final_local).param_count()
        + Norm::param_count(c)
        + Linear::param_count(c, cfg.output_dim))
}

impl FitModel {
    pub fn new(config: FitConfig) -> Result<Self> {
        let pattern = config.validate()?;
        let rng = RngStream::new(config.seed).split("init");
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, &rng);
        let (c, d) = (config.data_dim, config.latent_dim);
        let embed = match config.input {
            InputKind::Tokens => Embedding::Table(init.normal("embed", &[config.input_dim + 1, c], INIT_STD)),
            InputKind::Features => Embedding::Projection(Linear::new(&mut init, "embed", config.input_dim, c)),
        };
        let pos = PositionalEncoding::new(&mut init, "pos", config.groups, config.group_size, c)?;
        let latent_init = init.normal("latents.init", &[config.latents, d], INIT_STD);
        let latent_group = init.constant("latents.group", &[config.groups, d], 0.0);
        let mut blocks = Vec::with_capacity(pattern.blocks.len());
        for (i, &(l, g)) in pattern.blocks.iter().enumerate() {
            let mut b = init.scope(&format!("blocks.{i}"));
            blocks.push(Block {
                local: TransformerStack::new(&mut b, "local", local_spec(&config, l))?,
                l2x: CrossAttention::new(&mut b, "l2x", cross_spec(&config, d, c))?,
                global: TransformerStack::new(&mut b, "global", global_spec(&config, g))?,
                x2l: CrossAttention::new(&mut b, "x2l", cross_spec(&config, c, d))?,
            });
        }
        let final_local = TransformerStack::new(&mut init, "final.local", local_spec(&config, pattern.final_local))?;
        let final_norm = Norm::new(&mut init, "final.norm", c);
        let head = Linear::new(&mut init, "head", c, config.output_dim);
        Ok(Self {
            config,
            pattern,
            params,
            embed,
            pos,
            latent_init,
            latent_group,
            blocks,
            final_local,
            final_norm,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Slot layout for a flat input of `len` positions.
    pub fn layout(&self, len: usize) -> Result<GroupLayout> {
        let cfg = &self.config;
        let layout = GroupLayout::overlapped(len, cfg.group_size, cfg.prefix_overlap, cfg.padding)?;
        if layout.groups > cfg.groups {
            return usage_err(format!(
                "sequence of {len} needs {} groups but the model has {} (maximum length {})",
                layout.groups,
                cfg.groups,
                cfg.max_len()
            ));
        }
        Ok(layout)
    }

    /// Embeds and groups a batch. Padding slots hold the pad embedding for
    /// token inputs and zeros for feature inputs.
    pub fn embed(&self, s: &Session<'_>, input: Input<'_>) -> Result<(GroupedTokens, GroupLayout)> {
        let _c = opcount::component(Component::Other);
        match (input, &self.embed) {
            (Input::Tokens { ids, batch }, Embedding::Table(table)) => {
                if batch == 0 || ids.len() % batch != 0 {
                    return usage_err(format!("{} ids do not split into {batch} rows", ids.len()));
                }
                let len = ids.len() / batch;
                let layout = self.layout(len)?;
                let pad = self.config.input_dim;
                if let Some(bad) = ids.iter().find(|&&i| i >= pad) {
                    return usage_err(format!("token {bad} outside vocabulary of {pad}"));
                }
                let mut idx = Vec::with_capacity(batch * layout.slots.len());
                for row in ids.chunks(len) {
                    idx.extend(layout.arrange(row, pad));
                }
                let (t, n) = (layout.groups, layout.group_size);
                let values = s
                    .param(*table)
                    .gather_rows(&idx)?
                    .reshape(&[batch, t, n, self.config.data_dim])?;
                let valid = layout.slots.iter().any(Option::is_none).then(|| {
                    let v = layout.valid();
                    v.iter().copied().cycle().take(batch * v.len()).collect()
                });
                Ok((GroupedTokens::new(values, valid, layout.prefix)?, layout))
            }
            (Input::Features(x), Embedding::Projection(proj)) => {
                if x.rank() != 3 || x.shape()[2] != self.config.input_dim {
                    return dim_err(format!(
                        "expected (b, L, {}) features, got {:?}",
                        self.config.input_dim,
                        x.shape()
                    ));
                }
                let layout = self.layout(x.shape()[1])?;
                let h = proj.forward(s, x)?;
                Ok((arrange_tensor(&h, &layout)?, layout))
            }
            _ => usage_err("input kind does not match the model's configured input"),
        }
    }

    /// Positional encodings for `t` groups, shape `(t, n, c)`.
    pub fn positional(&self, s: &Session<'_>, t: usize, prefix: usize) -> Result<Tensor> {
        let n = self.config.group_size;
        let (gi, wi): (Vec<usize>, Vec<usize>) = (0..t * n)
            .map(|k| super::grouping::position_coords(k / n, k % n, n, prefix))
            .unzip();
        self.pos.at(s, &gi, &wi)?.reshape(&[t, n, self.config.data_dim])
    }

    /// Learned latent table broadcast to `(b, t, m, d)` plus a per-group
    /// embedding.
    pub fn initialize_latents(&self, s: &Session<'_>, b: usize, t: usize) -> Result<Tensor> {
        let (m, d) = (self.config.latents, self.config.latent_dim);
        if t > self.config.groups {
            return usage_err(format!("{t} groups exceed the configured {}", self.config.groups));
        }
        let init_idx: Vec<usize> = (0..b * t * m).map(|k| k % m).collect();
        let group_idx: Vec<usize> = (0..b * t * m).map(|k| (k / m) % t).collect();
        s.param(self.latent_init)
            .gather_rows(&init_idx)?
            .add(&s.param(self.latent_group).gather_rows(&group_idx)?)?
            .reshape(&[b, t, m, d])
    }

    pub(crate) fn check_grouped(&self, x: &GroupedTokens) -> Result<()> {
        let cfg = &self.config;
        if x.group_size() != cfg.group_size || x.dim() != cfg.data_dim || x.groups() > cfg.groups {
            return usage_err(format!(
                "grouped input {:?} does not fit a model with t <= {}, n = {}, c = {}",
                x.values.shape(),
                cfg.groups,
                cfg.group_size,
                cfg.data_dim
            ));
        }
        if x.prefix != cfg.prefix_overlap {
            return usage_err(format!(
                "input prefix overlap {} differs from the configured {}",
                x.prefix, cfg.prefix_overlap
            ));
        }
        Ok(())
    }

    /// Shared body of both modes. Returns data tokens `(b, t, n, c)` after the
    /// trailing local stack and the last block's latents `(b, t, m, d)`.
    pub(crate) fn body(&self, s: &Session<'_>, x: &GroupedTokens, causal: bool) -> Result<(Tensor, Tensor)> {
        self.check_grouped(x)?;
        let cfg = &self.config;
        let danger = cfg.danger;
        let (b, t, n, c) = (x.batch(), x.groups(), x.group_size(), x.dim());
        let (m, d) = (cfg.latents, cfg.latent_dim);
        let local_mask = (causal && !danger.no_causal_mask).then(|| AttentionMask::causal(n));
        let global_mask = (causal && !danger.no_group_causal_mask).then(|| AttentionMask::group_causal(t, m));
        let valid = x.valid.as_deref();

        let mut h = x.values.add(&self.positional(s, t, x.prefix)?)?.reshape(&[b * t, n, c])?;
        let mut latents = self.initialize_latents(s, b, t)?;
        for block in &self.blocks {
            h = {
                let _c = opcount::component(Component::Local);
                block.local.forward(s, &h, local_mask.as_ref(), valid, StackOptions::default())?
            };
            if danger.disable_cross_attention {
                continue;
            }
            let read = {
                let _c = opcount::component(Component::Cross);
                block.l2x.forward(s, &latents.reshape(&[b * t, m, d])?, &h, valid)?
            };
            let pooled = {
                let _c = opcount::component(Component::Global);
                block
                    .global
                    .forward(s, &read.reshape(&[b, t * m, d])?, global_mask.as_ref(), None, StackOptions::default())?
            };
            latents = pooled.reshape(&[b, t, m, d])?;
            let _c = opcount::component(Component::Cross);
            if causal && !danger.unshifted_latents {
                let shifted = super::ar::shift_latents(&latents)?;
                h = block.x2l.forward(s, &h, &shifted.shifted, None)?;
                latents = super::ar::shift_back_latents(&shifted)?;
            } else {
                h = block.x2l.forward(s, &h, &latents.reshape(&[b * t, m, d])?, None)?;
            }
        }
        h = {
            let _c = opcount::component(Component::Local);
            self.final_local
                .forward(s, &h, local_mask.as_ref(), valid, StackOptions::default())?
        };
        Ok((h.reshape(&[b, t, n, c])?, latents))
    }

    /// Encoder forward over grouped data tokens: returns data tokens
    /// `(b, t, n, c)` and latents `(b, t, m, d)`.
    pub fn fit_forward(&self, s: &Session<'_>, x: &GroupedTokens) -> Result<(Tensor, Tensor)> {
        if self.config.mode != Mode::Encoder {
            return usage_err("fit_forward needs an encoder-mode model");
        }
        self.body(s, x, false)
    }

    /// Final norm and dense head applied to data tokens `(..., c)`.
    pub fn output(&self, s: &Session<'_>, h: &Tensor) -> Result<Tensor> {
        let _c = opcount::component(Component::Other);
        self.head.forward(s, &self.final_norm.forward(s, h)?)
    }

    /// Embeds, runs the mode's forward and applies the head. Returns the
    /// layout and outputs of shape `(b, t, n, output_dim)`.
    pub fn predict(&self, s: &Session<'_>, input: Input<'_>) -> Result<(GroupLayout, Tensor)> {
        let (x, layout) = self.embed(s, input)?;
        let out = match self.config.mode {
            Mode::Encoder => {
                let (h, _) = self.fit_forward(s, &x)?;
                self.output(s, &h)?
            }
            Mode::Autoregressive => self.fitar_forward(s, &x)?,
        };
        Ok((layout, out))
    }
}
