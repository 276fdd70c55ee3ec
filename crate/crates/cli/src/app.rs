//! Argument parsing and dispatch. Exit codes: 0 success, 1 a check or run
//! failed, 2 usage or configuration error.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fit_core::fit::{Input, Sampler};
use fit_core::nn::Session;
use fit_core::rng::RngStream;
use fit_core::tensor::opcount::{self, Component};

use crate::checkpoint;
use crate::commands::{self, AnalysisSource, BenchOptions};
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use crate::tasks::{self, Batch};
use crate::train::{self, Trainer};

#[derive(Debug, Parser)]
#[command(name = "fit", version, about = "Grouped local/global transformers: train, generate, verify, analyze, bench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a synthetic task, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Continue a prompt with a trained autoregressive checkpoint.
    Generate(GenerateArgs),
    /// Analytical FLOPs tables.
    Analyze(AnalyzeArgs),
    /// Structural checks, with optional fault injection.
    Verify(VerifyArgs),
    /// Forward-pass timings of full attention against grouped attention.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print per-component forward multiply-accumulates for one batch.
    #[arg(long)]
    pub profile: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated token ids.
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub steps: usize,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write tokens here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print per-token latency and attention operation counts to stderr.
    #[arg(long)]
    pub profile: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// A cost configuration in TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "full,window_only,fit")]
    pub variants: String,
    /// Lengths, e.g. `2^10..2^20` or `1024,4096`.
    #[arg(long = "L", default_value = "2^10..2^20")]
    pub lengths: String,
    /// Global layer counts for a reallocation sweep at the longest length.
    #[arg(long)]
    pub reallocate: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Also check the model of this run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fault to inject: unshifted_latents, no_causal_mask,
    /// no_group_causal_mask or disable_cross_attention.
    #[arg(long)]
    pub inject: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Takes model width and head count from this run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "L", default_value = "256,512,1024,2048")]
    pub lengths: String,
    #[arg(long, default_value = "full,fit")]
    pub variants: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 64)]
    pub group_size: usize,
    #[arg(long, default_value_t = 2048.0)]
    pub max_memory_mb: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(io_err(format!("creating {}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect()
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let mut trainer = match (&a.resume, &a.config) {
        (Some(ckpt), _) => checkpoint::load(ckpt)?,
        (None, Some(path)) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Trainer::new(cfg)?
        }
        (None, None) => return Err(CliError::Usage("train needs --config or --resume".into())),
    };
    if let Some(out) = &a.out {
        trainer.config.out.clone_from(out);
    }
    let out = trainer.config.out.clone();
    if a.profile {
        profile_forward(&trainer)?;
    }
    let eval = train::run(&mut trainer, &out)?;
    println!("{}", serde_json::to_string(&eval).expect("evaluation serializes"));
    Ok(0)
}

fn profile_forward(t: &Trainer) -> Result<()> {
    let mut rng = RngStream::new(t.config.seed).split("profile");
    let batch = tasks::make_batch(&t.config, 1, &mut rng);
    let s = Session::inference(&t.model.params);
    opcount::start();
    match &batch {
        Batch::Tokens { ids, .. } => {
            t.model.predict(&s, Input::Tokens { ids, batch: 1 })?;
        }
        Batch::Features { len, input, .. } => {
            let x = fit_core::Tensor::new(&[1, *len, t.model.config.input_dim], input.clone())?;
            t.model.predict(&s, Input::Features(&x))?;
        }
    }
    let c = opcount::stop();
    eprintln!(
        "forward macs: local {} global {} cross {} other {}; score evaluations {}",
        c.component_macs(Component::Local),
        c.component_macs(Component::Global),
        c.component_macs(Component::Cross),
        c.component_macs(Component::Other),
        c.score_evals
    );
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> Result<i32> {
    let model = commands::load_model(&a.checkpoint)?;
    let prompt = commands::parse_prompt(&a.prompt)?;
    let sampler = if a.temperature > 0.0 { Sampler::Temperature(a.temperature) } else { Sampler::Greedy };
    let (tokens, profile) = commands::generate(&model, &prompt, a.steps, sampler, a.seed)?;
    if a.profile {
        for p in &profile {
            eprintln!(
                "token {} id {} latency_ms {:.3} score_evals {} macs {}",
                p.index, p.token, p.latency_ms, p.score_evals, p.macs
            );
        }
    }
    let line: Vec<String> = tokens.iter().map(usize::to_string).collect();
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "{}", line.join(" ")).map_err(io_err("writing tokens"))?;
    Ok(0)
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<i32> {
    let source = match (&a.preset, &a.config) {
        (Some(p), None) => AnalysisSource::Preset(p),
        (None, Some(c)) => AnalysisSource::Config(c),
        _ => return Err(CliError::Usage("analyze needs exactly one of --preset or --config".into())),
    };
    let lengths = commands::parse_lengths(&a.lengths)?;
    let reallocate = match &a.reallocate {
        Some(s) => split_list(s)
            .iter()
            .map(|v| v.parse().map_err(|_| CliError::Usage(format!("bad layer count {v:?}"))))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let rows = commands::analyze(source, &lengths, &split_list(&a.variants), &reallocate)?;
    let mut w = output(a.out.as_deref())?;
    match a.format {
        Format::Csv => commands::write_csv(&rows, &mut w)?,
        Format::Json => {
            let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
            writeln!(w, "{json}").map_err(io_err("writing json"))?;
        }
    }
    Ok(0)
}

fn verify_cmd(a: VerifyArgs) -> Result<i32> {
    let config = a.config.as_deref().map(RunConfig::load).transpose()?;
    let reports = commands::verify(a.seed, &a.inject, config.as_ref())?;
    let mut w = output(a.out.as_deref())?;
    for r in &reports {
        writeln!(w, "{}", r.to_json_line()).map_err(io_err("writing report"))?;
    }
    Ok(if reports.iter().all(|r| r.passed()) { 0 } else { 1 })
}

fn bench_cmd(a: BenchArgs) -> Result<i32> {
    let mut o = BenchOptions {
        variants: split_list(&a.variants),
        lengths: commands::parse_lengths(&a.lengths)?,
        reps: a.reps,
        group_size: a.group_size,
        max_memory_mb: a.max_memory_mb,
        seed: a.seed,
        ..BenchOptions::default()
    };
    if let Some(path) = &a.config {
        let cfg = RunConfig::load(path)?;
        o.dim = cfg.model.data_dim;
        o.heads = cfg.model.local_heads;
        o.latents = cfg.model.latents;
    }
    let report = commands::bench(&o)?;
    let mut w = output(a.out.as_deref())?;
    commands::write_csv(&report.rows, &mut w)?;
    for (v, s) in &report.slopes {
        eprintln!("{v}: log-log slope {s:.3}");
    }
    Ok(match report.fit_scales_better() {
        Some(false) => {
            eprintln!("grouped attention did not scale better than full attention");
            1
        }
        _ => 0,
    })
}
