//! Subcommand implementations, independent of argument parsing.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fit_core::complexity::{self, CostConfig, FlopsReport, Variant};
use fit_core::fit::{sample, Decoder, FitConfig, FitModel, Input, InputKind, Mode, Sampler};
use fit_core::nn::Session;
use fit_core::rng::RngStream;
use fit_core::tensor::opcount;
use fit_core::verify::{self, VerificationReport};
use fit_core::Tensor;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses a length list such as `2^10..2^20`, `1024,4096` or `512,2^12`.
/// A `2^a..2^b` range steps the exponent by one.
pub fn parse_lengths(spec: &str) -> Result<Vec<u64>> {
    let pow = |s: &str| -> Result<(bool, u64)> {
        let s = s.trim();
        match s.split_once('^') {
            Some(("2", e)) => {
                let e: u32 = e.parse().map_err(|_| usage(format!("bad exponent in {s:?}")))?;
                if e > 62 {
                    return Err(usage(format!("{s} is too large")));
                }
                Ok((true, e as u64))
            }
            Some(_) => Err(usage(format!("only powers of two are supported, got {s:?}"))),
            None => s.parse().map(|v| (false, v)).map_err(|_| usage(format!("bad length {s:?}"))),
        }
    };
    let mut out = Vec::new();
    for item in spec.split(',').filter(|s| !s.trim().is_empty()) {
        match item.split_once("..") {
            Some((a, b)) => match (pow(a)?, pow(b)?) {
                ((true, lo), (true, hi)) if lo <= hi => out.extend((lo..=hi).map(|e| 1u64 << e)),
                _ => return Err(usage(format!("ranges must be 2^a..2^b with a <= b, got {item:?}"))),
            },
            None => out.push(match pow(item)? {
                (true, e) => 1u64 << e,
                (false, v) => v,
            }),
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(usage("lengths must be a non-empty list of positive values"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisRow {
    pub variant: String,
    #[serde(rename = "L")]
    pub l: u64,
    pub t: u64,
    pub n: u64,
    pub m: u64,
    pub layers_local: u64,
    pub layers_global: u64,
    pub local_attn: f64,
    pub global_attn: f64,
    pub cross_attn: f64,
    pub projections: f64,
    pub local_ffn: f64,
    pub global_ffn: f64,
    pub cross_ffn: f64,
    pub total: f64,
    pub optimal_n: f64,
}

fn analysis_row(variant: &str, c: &CostConfig, r: &FlopsReport, optimal_n: f64) -> AnalysisRow {
    AnalysisRow {
        variant: variant.into(),
        l: c.seq_len,
        t: c.groups,
        n: c.group_size,
        m: c.latents,
        layers_local: c.layers_local,
        layers_global: c.layers_global,
        local_attn: r.local_attn,
        global_attn: r.global_attn,
        cross_attn: r.cross_attn,
        projections: r.projections,
        local_ffn: r.local_ffn,
        global_ffn: r.global_ffn,
        cross_ffn: r.cross_ffn,
        total: r.total,
        optimal_n,
    }
}

pub enum AnalysisSource<'a> {
    Preset(&'a str),
    Config(&'a Path),
}

/// Sweep rows for a preset, plus reallocation rows at the longest length
/// when `reallocate` lists global layer counts. A cost config file yields
/// one row.
pub fn analyze(source: AnalysisSource<'_>, lengths: &[u64], variants: &[String], reallocate: &[u64]) -> Result<Vec<AnalysisRow>> {
    let unit = complexity::CalibrationConstants::default();
    match source {
        AnalysisSource::Config(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
            let cfg: CostConfig = toml::from_str(&text).map_err(|e| CliError::Config {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            cfg.validate()?;
            let n = complexity::optimal_group_size(cfg.seq_len as f64, unit);
            Ok(vec![analysis_row("custom", &cfg, &complexity::total_cost(&cfg), n)])
        }
        AnalysisSource::Preset(name) => {
            let preset = complexity::preset(name)?;
            let variants = variants.iter().map(|v| Variant::parse(v)).collect::<fit_core::Result<Vec<_>>>()?;
            let mut rows: Vec<AnalysisRow> = complexity::sweep(&preset, lengths, &variants)
                .iter()
                .map(|r| analysis_row(r.variant.name(), &r.config, &r.report, r.optimal_n))
                .collect();
            if !reallocate.is_empty() {
                let l = *lengths.iter().max().expect("lengths are non-empty");
                if let Some(bad) = reallocate.iter().find(|&&k| k > 2 * preset.layers) {
                    return Err(usage(format!("{bad} global layers exceed the budget of {}", 2 * preset.layers)));
                }
                rows.extend(
                    complexity::reallocation_sweep(&preset, l, reallocate)
                        .iter()
                        .map(|r| analysis_row("fit_realloc", &r.config, &r.report, r.optimal_n)),
                );
            }
            Ok(rows)
        }
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err("writing csv"))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    #[serde(rename = "L")]
    pub l: u64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub variants: Vec<String>,
    pub lengths: Vec<u64>,
    pub reps: usize,
    pub dim: usize,
    pub heads: usize,
    pub group_size: usize,
    pub latents: usize,
    pub max_memory_mb: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            variants: vec!["full".into(), "fit".into()],
            lengths: vec![256, 512, 1024, 2048],
            reps: 3,
            dim: 16,
            heads: 2,
            group_size: 64,
            latents: 8,
            max_memory_mb: 2048.0,
            seed: 0,
        }
    }
}

fn bench_config(o: &BenchOptions, variant: &str, l: usize) -> Result<FitConfig> {
    let base = FitConfig {
        data_dim: o.dim,
        latent_dim: o.dim,
        latents: o.latents,
        local_heads: o.heads,
        global_heads: o.heads,
        cross_heads: o.heads,
        mode: Mode::Encoder,
        input: InputKind::Features,
        input_dim: o.dim,
        output_dim: o.dim,
        seed: o.seed,
        ..FitConfig::default()
    };
    Ok(match variant {
        "full" => FitConfig {
            pattern: "L2".into(),
            groups: 1,
            group_size: l,
            ..base
        },
        "fit" => FitConfig {
            pattern: "L1,G1,L1".into(),
            groups: l.div_ceil(o.group_size),
            group_size: o.group_size.min(l),
            ..base
        },
        other => return Err(usage(format!("unknown bench variant {other:?}; expected full or fit"))),
    })
}

/// Rough peak bytes of one forward pass: score and probability matrices of
/// every attention plus a few activations per token.
pub fn memory_estimate_mb(cfg: &FitConfig) -> f64 {
    let (t, n, m, c) = (cfg.groups as f64, cfg.group_size as f64, cfg.latents as f64, cfg.data_dim as f64);
    let h = cfg.local_heads as f64;
    let blocks = cfg.pattern().map_or(0, |p| p.blocks.len()) as f64;
    let local = 2.0 * 3.0 * h * t * n * n;
    let global = blocks * 3.0 * h * (t * m).powi(2);
    let cross = blocks * 2.0 * 3.0 * h * t * n * m;
    let acts = 64.0 * t * n * c * (cfg.ffn_expansion.max(1) as f64);
    (local + global + cross + acts) * 8.0 / (1024.0 * 1024.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of time against length per variant, when measurable.
    pub slopes: Vec<(String, f64)>,
}

impl BenchReport {
    /// Whether the grouped model scales strictly better than full attention.
    /// `None` when either slope is missing.
    pub fn fit_scales_better(&self) -> Option<bool> {
        let get = |v: &str| self.slopes.iter().find(|(n, _)| n == v).map(|s| s.1);
        Some(get("fit")? < get("full")?)
    }
}

pub fn bench(o: &BenchOptions) -> Result<BenchReport> {
    if o.reps == 0 {
        return Err(usage("reps must be positive"));
    }
    let mut plans = Vec::new();
    for v in &o.variants {
        for &l in &o.lengths {
            let l = usize::try_from(l).map_err(|_| usage("length too large"))?;
            let cfg = bench_config(o, v, l)?;
            let mb = memory_estimate_mb(&cfg);
            if mb > o.max_memory_mb {
                return Err(usage(format!(
                    "{v} at L={l} needs about {mb:.0} MiB, above the {:.0} MiB limit",
                    o.max_memory_mb
                )));
            }
            plans.push((v.clone(), l, cfg));
        }
    }
    let mut rows = Vec::new();
    for (variant, l, cfg) in plans {
        let model = FitModel::new(cfg)?;
        let mut rng = RngStream::new(o.seed).split("bench");
        let x = Tensor::new(&[1, l, o.dim], rng.normal_vec(l * o.dim, 1.0))?;
        let s = Session::inference(&model.params);
        model.predict(&s, Input::Features(&x))?;
        let mut times = Vec::with_capacity(o.reps);
        for _ in 0..o.reps {
            let started = Instant::now();
            model.predict(&s, Input::Features(&x))?;
            times.push(started.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
        rows.push(BenchRow {
            variant,
            l: l as u64,
            mean_ms: mean,
            std_ms: var.sqrt(),
            reps: o.reps,
        });
    }
    let mut slopes = Vec::new();
    for v in &o.variants {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| &r.variant == v)
            .map(|r| (r.l as f64, r.mean_ms.max(1e-6)))
            .collect();
        if points.len() >= 2 {
            slopes.push((v.clone(), complexity::log_log_slope(&points)));
        }
    }
    Ok(BenchReport { rows, slopes })
}

/// Runs the verification suite, plus causality and cache checks on a
/// configured autoregressive model. Parameters are randomized so that
/// zero-initialized projections do not hide leaks.
pub fn verify(seed: u64, inject: &[String], config: Option<&RunConfig>) -> Result<Vec<VerificationReport>> {
    let mut reports = verify::run_suite(seed, inject)?;
    if let Some(run) = config {
        let mut cfg = run.model.clone();
        for name in inject {
            cfg.danger.set(name)?;
        }
        let model = verify::randomized_model(cfg.clone(), seed)?;
        match cfg.mode {
            Mode::Autoregressive if cfg.input == InputKind::Tokens => {
                let len = cfg.max_len();
                if len >= 2 {
                    reports.push(verify::check_causality(&model, len, 20, seed)?);
                }
                reports.push(verify::check_teacher_forcing(&model, 1, len - 1, seed)?);
            }
            _ => {
                if cfg.danger.disable_cross_attention {
                    reports.push(verify::check_group_locality(&model, seed)?);
                }
            }
        }
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenProfile {
    pub index: usize,
    pub token: usize,
    pub latency_ms: f64,
    pub score_evals: u64,
    pub macs: u64,
}

/// Continues `prompt` from a trained checkpoint. Matches
/// [`fit_core::fit::generate`] token for token.
pub fn generate(model: &FitModel, prompt: &[usize], steps: usize, sampler: Sampler, seed: u64) -> Result<(Vec<usize>, Vec<TokenProfile>)> {
    if model.config.mode != Mode::Autoregressive {
        return Err(usage("generation needs an autoregressive checkpoint"));
    }
    if prompt.is_empty() {
        return Err(usage("generation needs a non-empty prompt"));
    }
    let max = model.config.max_len();
    if prompt.len() + steps > max {
        return Err(usage(format!(
            "prompt of {} plus {steps} steps exceeds the maximum length {max}",
            prompt.len()
        )));
    }
    let mut rng = RngStream::new(seed).split("sample");
    let mut dec = Decoder::new(model)?;
    let mut profile = Vec::new();
    let mut feed = |dec: &mut Decoder<'_>, index: usize, token: usize| -> Result<Vec<f64>> {
        opcount::start();
        let started = Instant::now();
        let logits = dec.feed(token)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let counts = opcount::stop();
        profile.push(TokenProfile {
            index,
            token,
            latency_ms,
            score_evals: counts.score_evals,
            macs: counts.total_macs(),
        });
        Ok(logits)
    };
    let mut logits = Vec::new();
    for (i, &tok) in prompt.iter().enumerate() {
        logits = feed(&mut dec, i, tok)?;
    }
    let mut out = prompt.to_vec();
    for k in 0..steps {
        let next = sample(&logits, sampler, &mut rng);
        out.push(next);
        if k + 1 < steps {
            logits = feed(&mut dec, out.len() - 1, next)?;
        }
    }
    Ok((out, profile))
}

pub fn load_model(path: &Path) -> Result<FitModel> {
    Ok(checkpoint::load(path)?.model)
}

pub fn parse_prompt(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad prompt token {s:?}"))))
        .collect()
}
