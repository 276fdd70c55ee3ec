//! Analytical FLOPs model of full, window-only and grouped local/global
//! transformers.
//!
//! One multiply-accumulate counts as two FLOPs. Attention counts the score
//! product and the weighted sum of values; projections are reported in their
//! own field. Softmax and normalization are not counted.

use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::fit::{FitConfig, FitModel, GroupedTokens, Mode};
use crate::nn::Session;
use crate::rng::RngStream;
use crate::tensor::opcount::{self, Component, Phase};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub seq_len: u64,
    pub groups: u64,
    pub group_size: u64,
    pub latents: u64,
    pub d_local: u64,
    pub d_global: u64,
    pub layers_local: u64,
    pub layers_global: u64,
    pub cross_attn_pairs: u64,
    pub ffn_expansion: u64,
    /// Whether each cross-attention is followed by its own FFN.
    pub cross_ffn: bool,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.group_size == 0 || self.d_local == 0 || self.d_global == 0 {
            return usage_err("groups, group size and widths must be positive");
        }
        if self.seq_len != self.groups * self.group_size {
            return usage_err(format!(
                "sequence length {} differs from {} groups of {}",
                self.seq_len, self.groups, self.group_size
            ));
        }
        Ok(())
    }
}

/// The per-layer products of the complexity table, before layer counts and
/// FLOP factors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Terms {
    /// `t n^2 d`
    pub local_attn: f64,
    /// `(t m)^2 d`
    pub global_attn: f64,
    /// `t n m d`, with `d` the data width.
    pub cross_attn: f64,
    /// `t n d^2 (2 expansion)`
    pub local_ffn: f64,
    /// `t m d^2 (2 expansion)`
    pub global_ffn: f64,
}

pub fn table1_terms(cfg: &CostConfig) -> Table1Terms {
    let (t, n, m) = (cfg.groups as f64, cfg.group_size as f64, cfg.latents as f64);
    let (dl, dg) = (cfg.d_local as f64, cfg.d_global as f64);
    let e = 2.0 * cfg.ffn_expansion as f64;
    Table1Terms {
        local_attn: t * n * n * dl,
        global_attn: (t * m) * (t * m) * dg,
        cross_attn: t * n * m * dl,
        local_ffn: t * n * dl * dl * e,
        global_ffn: t * m * dg * dg * e,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlopsReport {
    pub local_attn: f64,
    pub global_attn: f64,
    pub cross_attn: f64,
    pub projections: f64,
    pub local_ffn: f64,
    pub global_ffn: f64,
    pub cross_ffn: f64,
    pub total: f64,
}

impl FlopsReport {
    fn components(&self) -> [f64; 7] {
        [
            self.local_attn,
            self.global_attn,
            self.cross_attn,
            self.projections,
            self.local_ffn,
            self.global_ffn,
            self.cross_ffn,
        ]
    }

    fn with_total(mut self) -> Self {
        self.total = self.components().iter().sum();
        self
    }

    pub fn merge(&self, other: &FlopsReport) -> FlopsReport {
        FlopsReport {
            local_attn: self.local_attn + other.local_attn,
            global_attn: self.global_attn + other.global_attn,
            cross_attn: self.cross_attn + other.cross_attn,
            projections: self.projections + other.projections,
            local_ffn: self.local_ffn + other.local_ffn,
            global_ffn: self.global_ffn + other.global_ffn,
            cross_ffn: self.cross_ffn + other.cross_ffn,
            total: 0.0,
        }
        .with_total()
    }

    /// Component fractions of the total, in field order.
    pub fn shares(&self) -> [f64; 7] {
        let total = if self.total > 0.0 { self.total } else { 1.0 };
        self.components().map(|c| c / total)
    }
}

/// Attention FLOPs: score and value products (two MACs per term) plus the
/// query/key/value/output projections.
pub fn attention_cost(cfg: &CostConfig) -> FlopsReport {
    let base = table1_terms(cfg);
    let (t, n, m) = (cfg.groups as f64, cfg.group_size as f64, cfg.latents as f64);
    let (dl, dg) = (cfg.d_local as f64, cfg.d_global as f64);
    let (ll, lg, pairs) = (cfg.layers_local as f64, cfg.layers_global as f64, cfg.cross_attn_pairs as f64);
    // Latents read data in the latent width, data read latents in the data width.
    let cross_per_pair = 4.0 * t * n * m * (dl + dg);
    let proj_local = ll * 8.0 * t * n * dl * dl;
    let proj_global = lg * 8.0 * t * m * dg * dg;
    let proj_l2x = 2.0 * t * (2.0 * m * dg * dg + 2.0 * n * dl * dg);
    let proj_x2l = 2.0 * t * (2.0 * n * dl * dl + 2.0 * m * dg * dl);
    FlopsReport {
        local_attn: 4.0 * ll * base.local_attn,
        global_attn: 4.0 * lg * base.global_attn,
        cross_attn: pairs * cross_per_pair,
        projections: proj_local + proj_global + pairs * (proj_l2x + proj_x2l),
        ..FlopsReport::default()
    }
    .with_total()
}

/// Feed-forward FLOPs of local, global and (optionally) cross blocks.
pub fn ffn_cost(cfg: &CostConfig) -> FlopsReport {
    let base = table1_terms(cfg);
    let (ll, lg, pairs) = (cfg.layers_local as f64, cfg.layers_global as f64, cfg.cross_attn_pairs as f64);
    let cross = if cfg.cross_ffn {
        2.0 * pairs * (base.local_ffn + base.global_ffn)
    } else {
        0.0
    };
    FlopsReport {
        local_ffn: 2.0 * ll * base.local_ffn,
        global_ffn: 2.0 * lg * base.global_ffn,
        cross_ffn: cross,
        ..FlopsReport::default()
    }
    .with_total()
}

pub fn total_cost(cfg: &CostConfig) -> FlopsReport {
    attention_cost(cfg).merge(&ffn_cost(cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CalibrationConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for CalibrationConstants {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0 }
    }
}

/// `c1 L n + c2 (L / n)^2`.
pub fn attention_objective(l: f64, n: f64, c: CalibrationConstants) -> f64 {
    c.c1 * l * n + c.c2 * (l / n) * (l / n)
}

/// Continuous minimizer `(2 c2 L / c1)^(1/3)`.
pub fn optimal_group_size(l: f64, c: CalibrationConstants) -> f64 {
    (2.0 * c.c2 * l / c.c1).cbrt()
}

fn better(l: f64, a: u64, b: u64, c: CalibrationConstants) -> u64 {
    let (fa, fb) = (attention_objective(l, a as f64, c), attention_objective(l, b as f64, c));
    let tol = 1e-9 * fa.abs().max(fb.abs());
    if (fa - fb).abs() <= tol {
        a.min(b)
    } else if fa < fb {
        a
    } else {
        b
    }
}

/// Divisor of `L` with the lowest objective. The objective is convex in
/// `n`, so only the divisors on either side of the continuous optimum are
/// compared; near-ties go to the smaller divisor.
pub fn optimal_divisor(l: u64, c: CalibrationConstants) -> u64 {
    let star = optimal_group_size(l as f64, c);
    let divisors = divisors(l);
    let below = divisors.iter().rev().find(|&&d| d as f64 <= star).copied();
    let above = divisors.iter().find(|&&d| d as f64 >= star).copied();
    match (below, above) {
        (Some(a), Some(b)) => better(l as f64, a, b, c),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => 1,
    }
}

/// Brute-force minimizer over every divisor of `L`.
pub fn exhaustive_divisor(l: u64, c: CalibrationConstants) -> u64 {
    divisors(l).into_iter().fold(1, |best, d| if d == best { d } else { better(l as f64, best, d, c) })
}

pub fn divisors(l: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= l {
        if l % d == 0 {
            small.push(d);
            if d * d != l {
                large.push(l / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroupChoice {
    /// Continuous optimum at every length.
    Optimal,
    Fixed(f64),
}

/// Least-squares slope of `log cost` against `log L`.
pub fn scaling_exponent_check(c: CalibrationConstants, lengths: &[f64], choice: GroupChoice) -> Result<f64> {
    if lengths.len() < 3 {
        return usage_err(format!("need at least 3 lengths, got {}", lengths.len()));
    }
    let points: Vec<(f64, f64)> = lengths
        .iter()
        .map(|&l| {
            let n = match choice {
                GroupChoice::Optimal => optimal_group_size(l, c),
                GroupChoice::Fixed(n) => n,
            };
            (l.ln(), attention_objective(l, n, c).ln())
        })
        .collect();
    Ok(log_log_slope(&points))
}

pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// `count` lengths spaced geometrically over `[lo, hi]`.
pub fn geometric(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let step = (hi / lo).ln() / (count.max(2) - 1) as f64;
    (0..count).map(|i| lo * (step * i as f64).exp()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub layers: u64,
    pub d_model: u64,
    pub group_size: u64,
    pub latents: u64,
    pub ffn_expansion: u64,
}

pub const PRESET_NAMES: [&str; 3] = ["gpt3-medium", "13b", "gpt3"];

pub fn preset(name: &str) -> Result<Preset> {
    let (canonical, layers, d_model) = match name {
        "gpt3-medium" | "350m" => ("gpt3-medium", 24, 1024),
        "13b" => ("13b", 40, 5120),
        "gpt3" | "175b" => ("gpt3", 96, 12288),
        other => {
            return usage_err(format!(
                "unknown preset `{other}`; expected one of {} (or 350m, 175b)",
                PRESET_NAMES.join(", ")
            ))
        }
    };
    Ok(Preset {
        name: canonical,
        layers,
        d_model,
        group_size: 2048,
        latents: 64,
        ffn_expansion: 4,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WindowOnly,
    Fit,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "window_only" => Ok(Self::WindowOnly),
            "fit" => Ok(Self::Fit),
            other => usage_err(format!("unknown variant `{other}`; expected full, window_only or fit")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WindowOnly => "window_only",
            Self::Fit => "fit",
        }
    }
}

/// Number of cross-attention pairs in the FIT variant of every preset.
pub const FIT_BLOCKS: u64 = 2;

impl Preset {
    /// Group size used at length `L`; shorter sequences form one group.
    pub fn grouping(&self, l: u64) -> (u64, u64) {
        let n = self.group_size.min(l.max(1));
        (l.div_ceil(n), n)
    }

    /// Cost configuration of a variant at length `L`. `global_layers`
    /// overrides the FIT split, keeping local + global fixed at twice the
    /// base depth.
    pub fn cost_config(&self, variant: Variant, l: u64, global_layers: Option<u64>) -> CostConfig {
        let (t, n) = self.grouping(l);
        let base = CostConfig {
            seq_len: t * n,
            groups: t,
            group_size: n,
            latents: 0,
            d_local: self.d_model,
            d_global: self.d_model,
            layers_local: self.layers,
            layers_global: 0,
            cross_attn_pairs: 0,
            ffn_expansion: self.ffn_expansion,
            cross_ffn: false,
        };
        match variant {
            Variant::Full => CostConfig {
                groups: 1,
                group_size: t * n,
                ..base
            },
            Variant::WindowOnly => base,
            Variant::Fit => {
                let total = 2 * self.layers;
                let global = global_layers.unwrap_or(self.layers).min(total);
                CostConfig {
                    latents: self.latents,
                    layers_local: total - global,
                    layers_global: global,
                    cross_attn_pairs: FIT_BLOCKS,
                    cross_ffn: true,
                    ..base
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub config: CostConfig,
    pub report: FlopsReport,
    /// Continuous optimum for this length with unit constants.
    pub optimal_n: f64,
}

pub fn sweep(p: &Preset, lengths: &[u64], variants: &[Variant]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &l in lengths {
            let config = p.cost_config(variant, l, None);
            rows.push(SweepRow {
                variant,
                report: total_cost(&config),
                optimal_n: optimal_group_size(config.seq_len as f64, CalibrationConstants::default()),
                config,
            });
        }
    }
    rows
}

/// FIT rows at one length with `k` of the fixed layer budget moved to the
/// global stacks, for each `k` in `global_layers`.
pub fn reallocation_sweep(p: &Preset, l: u64, global_layers: &[u64]) -> Vec<SweepRow> {
    global_layers
        .iter()
        .map(|&k| {
            let config = p.cost_config(Variant::Fit, l, Some(k));
            SweepRow {
                variant: Variant::Fit,
                report: total_cost(&config),
                optimal_n: optimal_group_size(config.seq_len as f64, CalibrationConstants::default()),
                config,
            }
        })
        .collect()
}

/// Cost configuration matching an encoder model on `t` full groups.
pub fn cost_config_for(cfg: &FitConfig, t: usize) -> Result<CostConfig> {
    let pattern = cfg.validate()?;
    let local: usize = pattern.blocks.iter().map(|b| b.0).sum::<usize>() + pattern.final_local;
    let global: usize = pattern.blocks.iter().map(|b| b.1).sum();
    let (t, n) = (t as u64, cfg.group_size as u64);
    Ok(CostConfig {
        seq_len: t * n,
        groups: t,
        group_size: n,
        latents: cfg.latents as u64,
        d_local: cfg.data_dim as u64,
        d_global: cfg.latent_dim as u64,
        layers_local: local as u64,
        layers_global: global as u64,
        cross_attn_pairs: pattern.blocks.len() as u64,
        ffn_expansion: cfg.ffn_expansion as u64,
        cross_ffn: cfg.cross_ffn,
    })
}

/// Measured-to-analytic ratios from one instrumented forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Crosscheck {
    pub local_attn: f64,
    pub global_attn: f64,
    pub cross_attn: f64,
    pub ffn: f64,
    pub projections: f64,
    pub measured: FlopsReport,
    pub analytic: FlopsReport,
}

fn ratio(measured: f64, analytic: f64) -> f64 {
    if analytic == 0.0 {
        if measured == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        measured / analytic
    }
}

/// Runs one encoder forward pass with the op counter on and compares the
/// counted multiply-accumulates (as FLOPs) against the model above.
pub fn measured_opcount_crosscheck(cfg: &FitConfig) -> Result<Crosscheck> {
    if cfg.mode != Mode::Encoder || !cfg.local_self_attention {
        return usage_err("the cross-check needs an encoder with local self-attention");
    }
    if cfg.danger != Default::default() {
        return usage_err("the cross-check needs a model without fault injections");
    }
    let cost = cost_config_for(cfg, cfg.groups)?;
    let analytic = total_cost(&cost);
    let model = FitModel::new(cfg.clone())?;
    let s = Session::inference(&model.params);
    let (t, n, c) = (cfg.groups, cfg.group_size, cfg.data_dim);
    let x = Tensor::new(&[1, t, n, c], RngStream::new(cfg.seed).normal_vec(t * n * c, 1.0))?;
    let grouped = GroupedTokens::new(x, None, 0)?;
    opcount::start();
    let run = model.fit_forward(&s, &grouped);
    let counts = opcount::stop();
    run?;
    let flops = |comp: Component, phase: Phase| 2.0 * counts.macs(comp, phase) as f64;
    let cross_ffn = flops(Component::Cross, Phase::Ffn);
    let measured = FlopsReport {
        local_attn: flops(Component::Local, Phase::AttentionCore),
        global_attn: flops(Component::Global, Phase::AttentionCore),
        cross_attn: flops(Component::Cross, Phase::AttentionCore),
        projections: flops(Component::Local, Phase::Projection)
            + flops(Component::Global, Phase::Projection)
            + flops(Component::Cross, Phase::Projection),
        local_ffn: flops(Component::Local, Phase::Ffn),
        global_ffn: flops(Component::Global, Phase::Ffn),
        cross_ffn,
        total: 0.0,
    }
    .with_total();
    let ffn_measured = measured.local_ffn + measured.global_ffn + measured.cross_ffn;
    let ffn_analytic = analytic.local_ffn + analytic.global_ffn + analytic.cross_ffn;
    Ok(Crosscheck {
        local_attn: ratio(measured.local_attn, analytic.local_attn),
        global_attn: ratio(measured.global_attn, analytic.global_attn),
        cross_attn: ratio(measured.cross_attn, analytic.cross_attn),
        ffn: ratio(ffn_measured, ffn_analytic),
        projections: ratio(measured.projections, analytic.projections),
        measured,
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(t: u64, n: u64, m: u64, d: u64) -> CostConfig {
        CostConfig {
            seq_len: t * n,
            groups: t,
            group_size: n,
            latents: m,
            d_local: d,
            d_global: d,
            layers_local: 1,
            layers_global: 1,
            cross_attn_pairs: 1,
            ffn_expansion: 4,
            cross_ffn: false,
        }
    }

    #[test]
    fn table_terms_by_hand() {
        let base = table1_terms(&cfg(4, 8, 2, 16));
        assert_eq!(base.local_attn, 4096.0);
        assert_eq!(base.global_attn, 1024.0);
        assert_eq!(base.cross_attn, 1024.0);
        assert_eq!(table1_terms(&cfg(2, 4, 1, 8)).local_ffn, 4096.0);
    }

    #[test]
    fn limits_recover_full_attention() {
        // m = n makes the pooled latents as long as the sequence.
        let c = cfg(4, 8, 8, 16);
        assert_eq!(table1_terms(&c).global_attn, (32.0f64 * 32.0) * 16.0);
        let single = cfg(1, 32, 2, 16);
        assert_eq!(table1_terms(&single).local_attn, 32.0 * 32.0 * 16.0);
        let fit = attention_cost(&cfg(1, 32, 32, 16));
        assert_eq!(fit.global_attn / fit.local_attn, 1.0);
    }

    #[test]
    fn ffn_scaling() {
        let a = ffn_cost(&cfg(2, 4, 1, 8));
        let b = ffn_cost(&cfg(4, 4, 1, 8));
        assert_eq!(b.local_ffn, 2.0 * a.local_ffn);
        assert_eq!(ffn_cost(&cfg(2, 4, 0, 8)).global_ffn, 0.0);
        let off = CostConfig { ffn_expansion: 0, ..cfg(2, 4, 1, 8) };
        assert_eq!(ffn_cost(&off).total, 0.0);
    }

    #[test]
    fn optimal_group_size_examples() {
        let c = CalibrationConstants::default();
        assert!((optimal_group_size(4.0, c) - 2.0).abs() < 1e-12);
        assert!((optimal_group_size(32.0, c) - 4.0).abs() < 1e-12);
        assert_eq!(optimal_divisor(4, c), 2);
        assert_eq!(optimal_divisor(32, c), 4);
    }

    #[test]
    fn divisor_rounding_matches_brute_force() {
        for c in [
            CalibrationConstants::default(),
            CalibrationConstants { c1: 3.0, c2: 0.5 },
            CalibrationConstants { c1: 0.25, c2: 7.0 },
        ] {
            for l in 1..=4096 {
                assert_eq!(optimal_divisor(l, c), exhaustive_divisor(l, c), "L = {l}");
            }
        }
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
    }

    #[test]
    fn exponent_fits() {
        let c = CalibrationConstants::default();
        let wide = geometric(1e3, 1e9, 25);
        let opt = scaling_exponent_check(c, &wide, GroupChoice::Optimal).unwrap();
        assert!((opt - 4.0 / 3.0).abs() < 1e-9);
        let linear = scaling_exponent_check(CalibrationConstants { c1: 1.0, c2: 0.0 }, &wide, GroupChoice::Fixed(2048.0)).unwrap();
        assert!((linear - 1.0).abs() < 1e-9);
        // The quadratic global term takes over once L is far beyond n^3.
        let far = geometric(1e13, 1e18, 25);
        let fixed = scaling_exponent_check(c, &far, GroupChoice::Fixed(2048.0)).unwrap();
        assert!((fixed - 2.0).abs() < 0.02, "{fixed}");
        assert!(scaling_exponent_check(c, &[1.0, 2.0], GroupChoice::Optimal).is_err());
    }

    #[test]
    fn presets() {
        let p = preset("13b").unwrap();
        assert_eq!((p.layers, p.d_model), (40, 5120));
        assert_eq!(p.latents as f64 / p.group_size as f64, 0.03125);
        let g = preset("gpt3").unwrap();
        assert_eq!((g.layers, g.d_model), (96, 12288));
        let m = preset("gpt3-medium").unwrap();
        assert_eq!((m.layers, m.d_model), (24, 1024));
        assert!(matches!(preset("7b"), Err(crate::FitError::Usage(_))));
    }

    #[test]
    fn sweep_relations() {
        let lengths: Vec<u64> = (10..=20).map(|e| 1u64 << e).collect();
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            let rows = sweep(&p, &lengths, &[Variant::Full, Variant::WindowOnly, Variant::Fit]);
            assert_eq!(rows.len(), 33);
            let total = |v: Variant, l: u64| {
                rows.iter()
                    .find(|r| r.variant == v && r.config.seq_len == l)
                    .unwrap()
                    .report
                    .total
            };
            for &l in &lengths {
                assert!(total(Variant::Fit, l) > total(Variant::WindowOnly, l));
                assert!(total(Variant::Fit, l) <= 1.25 * total(Variant::WindowOnly, l), "{name} {l}");
            }
            let top = 1 << 20;
            assert!(total(Variant::Full, top) >= 10.0 * total(Variant::Fit, top), "{name}");
            let ks: Vec<u64> = (0..=2 * p.layers).collect();
            let realloc = reallocation_sweep(&p, top, &ks);
            assert!(realloc.windows(2).all(|w| w[1].report.total < w[0].report.total));
        }
    }

    #[test]
    fn crosscheck_ratios() {
        let cfg = FitConfig {
            pattern: "L2,G1,L1,G2,L1".into(),
            data_dim: 8,
            latent_dim: 4,
            groups: 3,
            group_size: 5,
            latents: 2,
            local_heads: 2,
            global_heads: 2,
            cross_heads: 2,
            mode: Mode::Encoder,
            ..FitConfig::default()
        };
        let r = measured_opcount_crosscheck(&cfg).unwrap();
        for v in [r.local_attn, r.global_attn, r.cross_attn, r.ffn, r.projections] {
            assert_eq!(v, 1.0);
        }
        let no_ffn = FitConfig { ffn_expansion: 0, ..cfg.clone() };
        let r = measured_opcount_crosscheck(&no_ffn).unwrap();
        assert_eq!(r.measured.local_ffn + r.measured.global_ffn + r.measured.cross_ffn, 0.0);
        assert_eq!(r.analytic.local_ffn + r.analytic.global_ffn + r.analytic.cross_ffn, 0.0);
        let ar = FitConfig { mode: Mode::Autoregressive, ..cfg };
        assert!(measured_opcount_crosscheck(&ar).is_err());
    }

    proptest! {
        #[test]
        fn total_is_component_sum(t in 1u64..50, n in 1u64..300, m in 0u64..40, dl in 1u64..200, dg in 1u64..200,
                                  ll in 0u64..5, lg in 0u64..5, pairs in 0u64..4, e in 0u64..5, cf in any::<bool>()) {
            let c = CostConfig {
                seq_len: t * n, groups: t, group_size: n, latents: m, d_local: dl, d_global: dg,
                layers_local: ll, layers_global: lg, cross_attn_pairs: pairs, ffn_expansion: e, cross_ffn: cf,
            };
            let r = total_cost(&c);
            let sum: f64 = r.components().iter().sum();
            prop_assert_eq!(r.total, sum);
            prop_assert!(r.components().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn attention_is_monotone(t in 1u64..20, n in 1u64..100, m in 0u64..20, d in 1u64..64) {
            let a = attention_cost(&cfg(t, n, m, d)).total;
            prop_assert!(attention_cost(&cfg(t + 1, n, m, d)).total >= a);
            prop_assert!(attention_cost(&cfg(t, n + 1, m, d)).total >= a);
            prop_assert!(attention_cost(&cfg(t, n, m + 1, d)).total >= a);
            prop_assert!(attention_cost(&cfg(t, n, m, d + 1)).total >= a);
        }
    }
}
