//! One-token-at-a-time decoding with cached keys, values and latents.
//!
//! Local attention keeps keys and values only for the open group. When a
//! group's last slot has been fed, its latent pipeline runs once per block
//! and the resulting post-global latents are stored; the next group's tokens
//! read them through the write-back cross-attention.

use super::config::Mode;
use super::grouping::position_coords;
use super::model::{Embedding, FitModel};
use crate::error::{usage_err, Result};
use crate::nn::{Session, TransformerStack};
use crate::rng::RngStream;
use crate::tensor::opcount::{self, Component};
use crate::tensor::Tensor;

type KvCache = Vec<Option<(Tensor, Tensor)>>;

#[derive(Clone, Debug)]
pub struct DecodeCache {
    /// Index of the open group.
    pub group: usize,
    /// Slots of the open group already filled.
    pub within: usize,
    /// Flat tokens fed so far.
    pub tokens: Vec<usize>,
    /// Per local stack (blocks, then the trailing stack), per layer.
    local_kv: Vec<KvCache>,
    /// Per block, local-stack outputs of the open group.
    local_out: Vec<Vec<Tensor>>,
    /// Per block, projected write-back source for the open group.
    source_kv: Vec<(Tensor, Tensor)>,
    /// Per block, per global layer, keys and values of completed groups.
    global_kv: Vec<KvCache>,
    /// Per block, post-global latents `(1, m, d)` of each completed group.
    pub latents: Vec<Vec<Tensor>>,
}

impl DecodeCache {
    pub fn completed_groups(&self) -> usize {
        self.latents.first().map_or(self.group, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature(f64),
}

pub struct Decoder<'a> {
    model: &'a FitModel,
    session: Session<'a>,
    cache: DecodeCache,
}

fn stack_step(s: &Session<'_>, stack: &TransformerStack, x: &Tensor, kv: &mut KvCache) -> Result<Tensor> {
    let mut x = x.clone();
    for (layer, slot) in stack.layers.iter().zip(kv.iter_mut()) {
        if let (Some(norm), Some(attn)) = (&layer.attn_norm, &layer.attn) {
            let h = norm.forward(s, &x)?;
            let q = attn.project_q(s, &h)?;
            let (k, v) = attn.project_kv(s, &h)?;
            let (k, v) = match slot.take() {
                Some((pk, pv)) => (Tensor::concat(&[&pk, &k], 1)?, Tensor::concat(&[&pv, &v], 1)?),
                None => (k, v),
            };
            x = x.add(&attn.attend(s, &q, &k, &v, None)?)?;
            *slot = Some((k, v));
        }
        let h = layer.ffn_norm.forward(s, &x)?;
        x = x.add(&layer.ffn.forward(s, &h)?)?;
    }
    Ok(x)
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a FitModel) -> Result<Self> {
        if model.config.mode != Mode::Autoregressive {
            return usage_err("decoding needs an autoregressive model");
        }
        let session = Session::inference(&model.params);
        let blocks = &model.blocks;
        let m = model.config.latents;
        let d = model.config.latent_dim;
        let zeros = Tensor::zeros(&[1, m, d]);
        let source_kv = blocks
            .iter()
            .map(|b| b.x2l.source_kv(&session, &zeros))
            .collect::<Result<_>>()?;
        let mut local_kv: Vec<KvCache> = blocks.iter().map(|b| vec![None; b.local.depth()]).collect();
        local_kv.push(vec![None; model.final_local.depth()]);
        let cache = DecodeCache {
            group: 0,
            within: 0,
            tokens: Vec::new(),
            local_kv,
            local_out: vec![Vec::new(); blocks.len()],
            source_kv,
            global_kv: blocks.iter().map(|b| vec![None; b.global.depth()]).collect(),
            latents: vec![Vec::new(); blocks.len()],
        };
        Ok(Self {
            model,
            session,
            cache,
        })
    }

    pub fn cache(&self) -> &DecodeCache {
        &self.cache
    }

    /// Feeds the next flat token and returns the logits predicting the one
    /// after it.
    pub fn feed(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if token >= cfg.input_dim {
            return usage_err(format!("token {token} outside vocabulary of {}", cfg.input_dim));
        }
        if self.cache.tokens.len() >= cfg.max_len() {
            return usage_err(format!("sequence would exceed the maximum length {}", cfg.max_len()));
        }
        if self.cache.within == cfg.group_size {
            self.open_next_group()?;
        }
        self.cache.tokens.push(token);
        self.step(token)
    }

    fn open_next_group(&mut self) -> Result<()> {
        let s = &self.session;
        let c = &mut self.cache;
        let g = c.group;
        c.group += 1;
        c.within = 0;
        for kv in &mut c.local_kv {
            kv.iter_mut().for_each(|slot| *slot = None);
        }
        c.local_out.iter_mut().for_each(Vec::clear);
        {
            let _c = opcount::component(Component::Cross);
            for (i, block) in self.model.blocks.iter().enumerate() {
                c.source_kv[i] = block.x2l.source_kv(s, &c.latents[i][g])?;
            }
        }
        let p = self.model.config.prefix_overlap;
        let len = self.cache.tokens.len();
        let prefix: Vec<usize> = self.cache.tokens[len - p..].to_vec();
        for tok in prefix {
            self.step(tok)?;
        }
        Ok(())
    }

    fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let cfg = &model.config;
        let s = &self.session;
        let c = &mut self.cache;
        let (g, j) = position_coords(c.group, c.within, cfg.group_size, cfg.prefix_overlap);
        let mut x = {
            let _c = opcount::component(Component::Other);
            let Embedding::Table(table) = &model.embed else {
                return usage_err("decoding needs token inputs");
            };
            s.param(*table)
                .gather_rows(&[token])?
                .add(&model.pos.at(s, &[g], &[j])?)?
                .reshape(&[1, 1, cfg.data_dim])?
        };
        for (i, block) in model.blocks.iter().enumerate() {
            x = {
                let _c = opcount::component(Component::Local);
                stack_step(s, &block.local, &x, &mut c.local_kv[i])?
            };
            c.local_out[i].push(x.clone());
            let _c = opcount::component(Component::Cross);
            let (k, v) = &c.source_kv[i];
            x = block.x2l.forward_with_kv(s, &x, k, v, None)?;
        }
        let last = model.blocks.len();
        x = {
            let _c = opcount::component(Component::Local);
            stack_step(s, &model.final_local, &x, &mut c.local_kv[last])?
        };
        let logits = model.output(s, &x)?.to_vec();
        c.within += 1;
        if c.within == cfg.group_size {
            self.finish_group()?;
        }
        Ok(logits)
    }

    fn finish_group(&mut self) -> Result<()> {
        let model = self.model;
        let s = &self.session;
        let c = &mut self.cache;
        let mut lat = model
            .initialize_latents(s, 1, c.group + 1)?
            .slice_axis(1, c.group, c.group + 1)?
            .reshape(&[1, model.config.latents, model.config.latent_dim])?;
        for (i, block) in model.blocks.iter().enumerate() {
            let rows: Vec<&Tensor> = c.local_out[i].iter().collect();
            let data = Tensor::concat(&rows, 1)?;
            lat = {
                let _c = opcount::component(Component::Cross);
                block.l2x.forward(s, &lat, &data, None)?
            };
            lat = {
                let _c = opcount::component(Component::Global);
                stack_step(s, &block.global, &lat, &mut c.global_kv[i])?
            };
            c.latents[i].push(lat.clone());
        }
        Ok(())
    }
}

/// Picks the next token from `logits`. Greedy breaks ties toward the lower
/// index; temperature sampling draws from `softmax(logits / tau)`.
pub fn sample(logits: &[f64], sampler: Sampler, rng: &mut RngStream) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    match sampler {
        Sampler::Greedy => argmax(),
        Sampler::Temperature(tau) if tau <= 0.0 => argmax(),
        Sampler::Temperature(tau) => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.uniform() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            argmax()
        }
    }
}

/// Continues `prompt` by `steps` tokens.
pub fn generate(model: &FitModel, prompt: &[usize], steps: usize, sampler: Sampler, seed: u64) -> Result<Vec<usize>> {
    if steps == 0 {
        return Ok(prompt.to_vec());
    }
    if prompt.is_empty() {
        return usage_err("generation needs a non-empty prompt");
    }
    let max = model.config.max_len();
    if prompt.len() + steps > max {
        return usage_err(format!(
            "prompt of {} plus {steps} steps exceeds the maximum length {max}",
            prompt.len()
        ));
    }
    let mut rng = RngStream::new(seed).split("sample");
    let mut dec = Decoder::new(model)?;
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = dec.feed(tok)?;
    }
    let mut out = prompt.to_vec();
    for k in 0..steps {
        let next = sample(&logits, sampler, &mut rng);
        out.push(next);
        if k + 1 < steps {
            logits = dec.feed(next)?;
        }
    }
    Ok(out)
}
