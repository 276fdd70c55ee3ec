//! Executable structural checks: causality, group locality, block-diagonal
//! equivalence, cached decoding against teacher forcing, and gradients.
//!
//! Every check is deterministic in `(seed, config)` and yields a
//! [`VerificationReport`] whose status is pass exactly when the worst
//! violation is within tolerance.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{usage_err, Result};
use crate::fit::{ar_loss, Decoder, FitConfig, FitModel, GroupLayout, GroupedTokens, Input, InputKind, Mode};
use crate::nn::{AttentionMask, Init, ParamStore, Session, StackOptions, StackSpec, TransformerStack};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};

pub const PROBE: f64 = 1e-3;
pub const STRUCTURE_TOL: f64 = 1e-9;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const CACHE_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
/// Scale given to every parameter of verification models, so that
/// zero-initialized projections do not hide a leak.
pub const RANDOM_PARAM_STD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub check: String,
    pub config: String,
    pub status: Status,
    pub violation: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl VerificationReport {
    pub fn new(check: &str, config: String, violation: f64, tolerance: f64, seed: u64) -> Self {
        let status = if violation <= tolerance { Status::Pass } else { Status::Fail };
        Self {
            check: check.into(),
            config,
            status,
            violation,
            tolerance,
            seed,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Short hash of a config, including any fault injections.
pub fn fingerprint(cfg: &FitConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(format!("{:?}", cfg.danger).as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// A model with every parameter drawn from `N(0, 0.3^2)` (gains around 1).
pub fn randomized_model(cfg: FitConfig, seed: u64) -> Result<FitModel> {
    let mut model = FitModel::new(cfg)?;
    model.params.randomize(&RngStream::new(seed).split("verify"), RANDOM_PARAM_STD);
    Ok(model)
}

fn random_tokens(rng: &mut RngStream, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

/// Embedded, grouped input as a constant tensor, with its layout.
fn embedded(model: &FitModel, tokens: &[usize]) -> Result<(GroupedTokens, GroupLayout)> {
    let s = Session::inference(&model.params);
    let (g, layout) = model.embed(&s, Input::Tokens { ids: tokens, batch: 1 })?;
    Ok((GroupedTokens::new(g.values.detach(), g.valid, g.prefix)?, layout))
}

fn with_values(g: &GroupedTokens, values: Tensor) -> Result<GroupedTokens> {
    GroupedTokens::new(values, g.valid.clone(), g.prefix)
}

/// Adds `delta` to channel 0 of every slot holding flat position `q`. A
/// single channel is used because layer norm removes uniform shifts.
fn perturb(g: &GroupedTokens, layout: &GroupLayout, q: usize, delta: f64) -> Result<GroupedTokens> {
    let c = g.dim();
    let mut v = g.values.to_vec();
    for (slot, held) in layout.slots.iter().enumerate() {
        if *held == Some(q) {
            v[slot * c] += delta;
        }
    }
    with_values(g, Tensor::new(g.values.shape(), v)?)
}

/// Perturbs random positions `q` and checks that logits at every slot
/// holding a position `p < q` do not move; also checks that gradients of
/// random logits with respect to later inputs are exactly zero.
pub fn check_causality(model: &FitModel, seq_len: usize, trials: usize, seed: u64) -> Result<VerificationReport> {
    if model.config.mode != Mode::Autoregressive {
        return usage_err("causality checks need an autoregressive model");
    }
    if seq_len < 2 {
        return usage_err("causality checks need at least two positions");
    }
    let cfg = &model.config;
    let mut rng = RngStream::new(seed).split("causality");
    let tokens = random_tokens(&mut rng, seq_len, cfg.input_dim);
    let (x, layout) = embedded(model, &tokens)?;
    let s = Session::inference(&model.params);
    let base = model.fitar_forward(&s, &x)?;
    let v = cfg.output_dim;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let q = 1 + rng.below(seq_len - 1);
        let out = model.fitar_forward(&s, &perturb(&x, &layout, q, PROBE)?)?;
        for (slot, held) in layout.slots.iter().enumerate() {
            if held.is_some_and(|pos| pos < q) {
                let a = &out.data()[slot * v..(slot + 1) * v];
                let b = &base.data()[slot * v..(slot + 1) * v];
                worst = worst.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            }
        }
    }
    let grad_trials = trials.clamp(1, 16);
    for _ in 0..grad_trials {
        let p = rng.below(seq_len - 1);
        let slot = layout.slot_of(p).expect("every position has a slot");
        let k = rng.below(v);
        let g = Graph::new();
        let gs = Session::inference(&model.params);
        let xt = with_values(&x, g.track(&x.values))?;
        let logits = model.fitar_forward(&gs, &xt)?;
        let pick = logits.reshape(&[logits.numel()])?.slice_axis(0, slot * v + k, slot * v + k + 1)?;
        let grads = pick.sum().backward()?;
        let gx = grads.get_or_zeros(&xt.values);
        let c = x.dim();
        for (s2, held) in layout.slots.iter().enumerate() {
            if held.is_some_and(|pos| pos > p) {
                for val in &gx[s2 * c..(s2 + 1) * c] {
                    if *val != 0.0 {
                        // Any nonzero gradient is a leak regardless of size.
                        worst = worst.max(val.abs().max(f64::MIN_POSITIVE) + STRUCTURE_TOL);
                    }
                }
            }
        }
    }
    Ok(VerificationReport::new("causality", fingerprint(cfg), worst, STRUCTURE_TOL, seed))
}

/// Perturbs one token in each group of an encoder and measures the largest
/// change in any other group. Passes only at exact zero.
pub fn check_group_locality(model: &FitModel, seed: u64) -> Result<VerificationReport> {
    let cfg = &model.config;
    if cfg.mode != Mode::Encoder {
        return usage_err("group locality applies to encoder models");
    }
    let (t, n, c) = (cfg.groups, cfg.group_size, cfg.data_dim);
    let mut rng = RngStream::new(seed).split("locality");
    let x = Tensor::new(&[1, t, n, c], rng.normal_vec(t * n * c, 1.0))?;
    let g = GroupedTokens::new(x, None, 0)?;
    let s = Session::inference(&model.params);
    let (base, _) = model.fit_forward(&s, &g)?;
    let layout = GroupLayout::contiguous(t * n, t, false)?;
    let mut worst: f64 = 0.0;
    for grp in 0..t {
        let q = grp * n + rng.below(n);
        let (out, _) = model.fit_forward(&s, &perturb(&g, &layout, q, PROBE)?)?;
        for i in (0..t * n).filter(|i| i / n != grp) {
            let a = &out.data()[i * c..(i + 1) * c];
            let b = &base.data()[i * c..(i + 1) * c];
            worst = worst.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    Ok(VerificationReport::new("group_locality", fingerprint(cfg), worst, 0.0, seed))
}

/// A stack with random parameters for the equivalence check.
pub fn random_stack(dim: usize, heads: usize, layers: usize, seed: u64) -> Result<(ParamStore, TransformerStack)> {
    let mut store = ParamStore::new();
    let rng = RngStream::new(seed);
    let spec = StackSpec {
        dim,
        heads,
        layers,
        ffn_expansion: 4,
        self_attention: true,
    };
    let stack = TransformerStack::new(&mut Init::new(&mut store, &rng), "stack", spec)?;
    store.randomize(&rng.split("random"), RANDOM_PARAM_STD);
    Ok((store, stack))
}

/// Per-group stack outputs against the same stack on the flat sequence
/// under a block-diagonal mask.
pub fn check_blockdiag_equivalence(
    store: &ParamStore,
    stack: &TransformerStack,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<VerificationReport> {
    let c = stack.spec.dim;
    let x = Tensor::new(&[1, t * n, c], RngStream::new(seed).split("blockdiag").normal_vec(t * n * c, 1.0))?;
    let s = Session::inference(store);
    let mask = AttentionMask::block_diagonal(t, n);
    let flat = stack.forward(&s, &x, Some(&mask), None, StackOptions::default())?;
    let grouped = stack.forward(&s, &x.reshape(&[t, n, c])?, None, None, StackOptions::default())?;
    let worst = flat
        .data()
        .iter()
        .zip(grouped.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let label = format!("stack-d{c}-h{}-k{}-t{t}-n{n}", stack.spec.heads, stack.depth());
    Ok(VerificationReport::new("blockdiag_equivalence", label, worst, EQUIVALENCE_TOL, seed))
}

/// Greedy decoding through the cache against one teacher-forced forward
/// pass over the produced sequence, compared at every fed position.
pub fn check_teacher_forcing(model: &FitModel, prompt_len: usize, steps: usize, seed: u64) -> Result<VerificationReport> {
    let cfg = &model.config;
    if cfg.mode != Mode::Autoregressive {
        return usage_err("teacher forcing applies to autoregressive models");
    }
    if prompt_len == 0 || prompt_len + steps > cfg.max_len() {
        return usage_err(format!(
            "prompt {prompt_len} plus {steps} steps must fit in 1..={}",
            cfg.max_len()
        ));
    }
    let mut rng = RngStream::new(seed).split("teacher");
    let mut tokens = random_tokens(&mut rng, prompt_len, cfg.input_dim);
    let mut dec = Decoder::new(model)?;
    let mut stepped = Vec::new();
    for &tok in &tokens {
        stepped.push(dec.feed(tok)?);
    }
    for k in 0..steps {
        let next = crate::fit::sample(stepped.last().expect("prompt is non-empty"), crate::fit::Sampler::Greedy, &mut rng);
        tokens.push(next);
        if k + 1 < steps {
            stepped.push(dec.feed(next)?);
        }
    }
    let s = Session::inference(&model.params);
    let (layout, logits) = model.predict(&s, Input::Tokens { ids: &tokens, batch: 1 })?;
    let v = cfg.output_dim;
    let mut worst: f64 = 0.0;
    for (q, row) in stepped.iter().enumerate() {
        let slot = layout.slot_of(q).expect("every position has a slot");
        let reference = &logits.data()[slot * v..(slot + 1) * v];
        worst = worst.max(row.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(VerificationReport::new("teacher_forcing", fingerprint(cfg), worst, CACHE_TOL, seed))
}

fn random_loss(model: &FitModel, s: &Session<'_>, seed: u64) -> Result<Tensor> {
    let cfg = &model.config;
    let mut rng = RngStream::new(seed).split("gradcheck");
    let len = cfg.max_len();
    match (cfg.mode, cfg.input) {
        (Mode::Autoregressive, _) => {
            let tokens = random_tokens(&mut rng, len, cfg.input_dim);
            let targets: Vec<usize> = random_tokens(&mut rng, len, cfg.output_dim);
            let (layout, logits) = model.predict(s, Input::Tokens { ids: &tokens, batch: 1 })?;
            let tg = layout.arrange(&targets.iter().map(|&t| Some(t)).collect::<Vec<_>>(), None);
            ar_loss(&logits, &tg, cfg.prefix_overlap)
        }
        (Mode::Encoder, InputKind::Tokens) => {
            let tokens = random_tokens(&mut rng, len, cfg.input_dim);
            let (_, out) = model.predict(s, Input::Tokens { ids: &tokens, batch: 1 })?;
            let target = rng.normal_vec(out.numel(), 1.0);
            out.mse(&target, None)
        }
        (Mode::Encoder, InputKind::Features) => {
            let x = Tensor::new(&[1, len, cfg.input_dim], rng.normal_vec(len * cfg.input_dim, 1.0))?;
            let (_, out) = model.predict(s, Input::Features(&x))?;
            let target = rng.normal_vec(out.numel(), 1.0);
            out.mse(&target, None)
        }
    }
}

/// Central finite differences (step 1e-5) against reverse-mode gradients
/// for every trainable parameter. Frozen parameters must get no gradient.
pub fn check_gradients(model: &FitModel, tolerance: f64, seed: u64) -> Result<VerificationReport> {
    let g = Graph::new();
    let s = Session::training(&model.params, &g);
    let grads = s.param_grads(&random_loss(model, &s, seed)?.backward()?);
    let h = 1e-5;
    let mut probe = model.params.clone();
    let mut worst: f64 = 0.0;
    for id in model.params.ids() {
        let entry = model.params.get(id);
        match (&grads[id.index()], entry.trainable) {
            (Some(_), false) => worst = f64::INFINITY,
            (None, _) => continue,
            (Some(analytic), true) => {
                for k in 0..analytic.len() {
                    let orig = entry.value[k];
                    probe.get_mut(id).value[k] = orig + h;
                    let up = random_loss(model, &Session::inference(&probe), seed)?.item()?;
                    probe.get_mut(id).value[k] = orig - h;
                    let down = random_loss(model, &Session::inference(&probe), seed)?.item()?;
                    probe.get_mut(id).value[k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let scale = analytic[k].abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max((analytic[k] - numeric).abs() / scale);
                }
            }
        }
    }
    Ok(VerificationReport::new("gradients", fingerprint(&model.config), worst, tolerance, seed))
}

/// Default configurations exercised by the suite.
pub fn suite_configs() -> Vec<FitConfig> {
    let ar = |pattern: &str, t: usize, n: usize, p: usize| FitConfig {
        pattern: pattern.into(),
        data_dim: 8,
        latent_dim: 8,
        groups: t,
        group_size: n,
        latents: 2,
        local_heads: 2,
        global_heads: 2,
        cross_heads: 2,
        prefix_overlap: p,
        input_dim: 6,
        output_dim: 6,
        ..FitConfig::default()
    };
    vec![
        ar("L1,G1,L1", 1, 4, 0),
        ar("L1,G1,L1", 3, 4, 0),
        ar("L1,G1,L1,G1,L1", 4, 2, 0),
        ar("L2,G1,L1", 3, 4, 1),
    ]
}

fn encoder_config(danger_free: bool) -> FitConfig {
    let mut cfg = FitConfig {
        pattern: "L1,G1,L1".into(),
        data_dim: 8,
        latent_dim: 8,
        groups: 3,
        group_size: 4,
        latents: 2,
        local_heads: 2,
        global_heads: 2,
        cross_heads: 2,
        mode: Mode::Encoder,
        input: InputKind::Features,
        input_dim: 3,
        output_dim: 3,
        ..FitConfig::default()
    };
    cfg.danger.disable_cross_attention = danger_free;
    cfg
}

/// Configurations small enough for a full finite-difference sweep.
pub fn gradcheck_configs() -> Vec<FitConfig> {
    let shrink = |mut cfg: FitConfig| {
        cfg.data_dim = 4;
        cfg.latent_dim = 4;
        cfg.latents = 1;
        cfg.ffn_expansion = 1;
        cfg.local_heads = 1;
        cfg.global_heads = 1;
        cfg.cross_heads = 2;
        cfg.input_dim = 3;
        cfg.output_dim = 3;
        cfg
    };
    let mut enc = shrink(encoder_config(false));
    enc.groups = 2;
    enc.group_size = 2;
    let mut ar = shrink(suite_configs()[1].clone());
    ar.groups = 2;
    ar.group_size = 3;
    vec![enc, ar]
}

/// Runs every check over the default configurations, with the named faults
/// injected into every model.
pub fn run_suite(seed: u64, inject: &[String]) -> Result<Vec<VerificationReport>> {
    let mut reports = Vec::new();
    let apply = |mut cfg: FitConfig| -> Result<FitConfig> {
        for name in inject {
            cfg.danger.set(name)?;
        }
        Ok(cfg)
    };
    for (i, cfg) in suite_configs().into_iter().enumerate() {
        let cfg = apply(cfg)?;
        let model = randomized_model(cfg.clone(), seed + i as u64)?;
        let len = cfg.max_len();
        reports.push(check_causality(&model, len, 40, seed)?);
        reports.push(check_teacher_forcing(&model, 2.min(len), len - 2.min(len), seed)?);
    }
    let locality = randomized_model(apply(encoder_config(true))?, seed)?;
    reports.push(check_group_locality(&locality, seed)?);
    for k in 0..3u64 {
        let (store, stack) = random_stack(8, 2, 2, seed + k)?;
        reports.push(check_blockdiag_equivalence(&store, &stack, 2, 4, seed + k)?);
    }
    for cfg in gradcheck_configs() {
        let model = randomized_model(apply(cfg)?, seed)?;
        reports.push(check_gradients(&model, GRAD_TOL, seed)?);
    }
    Ok(reports)
}
