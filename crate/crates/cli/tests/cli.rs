use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fit_cli::checkpoint;
use fit_cli::commands::{self, AnalysisSource, BenchOptions};
use fit_cli::config::{RunConfig, Task};
use fit_cli::tasks::{self, Batch};
use fit_cli::train::{self, Trainer};
use fit_cli::{CheckpointError, CliError};
use fit_core::complexity::{optimal_group_size, CalibrationConstants};
use fit_core::fit::{generate, FitConfig, InputKind, Mode, Sampler};
use fit_core::rng::RngStream;
use proptest::prelude::*;
use tempfile::TempDir;

fn tiny_copy(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        task: Task::Copy,
        batch: 4,
        steps: 12,
        out: out.to_path_buf(),
        model: FitConfig {
            pattern: "L1,G1,L1".into(),
            data_dim: 8,
            latent_dim: 8,
            groups: 2,
            group_size: 4,
            latents: 2,
            local_heads: 2,
            global_heads: 2,
            cross_heads: 2,
            input_dim: 5,
            output_dim: 5,
            ..FitConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.data.eval_sequences = 8;
    cfg.optimizer.warmup_steps = 2;
    cfg
}

fn tiny_denoise(out: &Path) -> RunConfig {
    let mut cfg = tiny_copy(out);
    cfg.task = Task::Denoise;
    cfg.model.mode = Mode::Encoder;
    cfg.model.input = InputKind::Features;
    cfg.model.input_dim = 3;
    cfg.model.output_dim = 3;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fit"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn empty_config_takes_every_default() {
    let cfg = RunConfig::parse("", Path::new("x.toml")).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.optimizer.lr, 3e-4);
    assert_eq!(cfg.optimizer.betas, [0.9, 0.999]);
    assert_eq!(cfg.optimizer.warmup_steps, 100);
}

#[test]
fn unknown_key_is_rejected_with_its_name_and_line() {
    let err = RunConfig::parse("batch = 4\n[model]\nwidth = 3\n", Path::new("x.toml")).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::Config { .. }));
    assert!(msg.contains("width"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn wrongly_typed_value_is_a_config_error() {
    let err = RunConfig::parse("steps = \"many\"\n", Path::new("x.toml")).unwrap_err();
    assert!(err.to_string().contains("steps"), "{err}");
}

#[test]
fn task_model_mismatch_is_a_config_error() {
    let err = RunConfig::parse("task = \"denoise\"\n", Path::new("x.toml")).unwrap_err();
    assert!(matches!(err, CliError::Config { .. }));
    let err = RunConfig::parse("[model]\ngroups = 3\n", Path::new("x.toml")).unwrap_err();
    assert!(err.to_string().contains("even"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_text(
        lr in 1e-6f64..1.0,
        beta in 0.0f64..0.999,
        batch in 1usize..64,
        steps in 0u64..100_000,
        seed in any::<u64>(),
        noise in 0.0f64..3.0,
        groups in 1usize..4,
    ) {
        let mut cfg = RunConfig::default();
        cfg.task = Task::ToyPixels;
        cfg.optimizer.lr = lr;
        cfg.optimizer.betas = [beta, 0.999];
        cfg.batch = batch;
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.data.noise_std = noise;
        cfg.model.groups = 8 * groups;
        cfg.model.input_dim = 9;
        let text = cfg.to_toml();
        prop_assert_eq!(RunConfig::parse(&text, Path::new("p.toml")).unwrap(), cfg);
    }
}

#[test]
fn copy_batch_repeats_the_prefix_across_the_group_boundary() {
    let cfg = tiny_copy(Path::new("unused"));
    let Batch::Tokens { ids, targets, probe, rows } = tasks::make_batch(&cfg, 3, &mut RngStream::new(1)) else {
        panic!("token batch expected")
    };
    assert_eq!(rows, 3);
    let n = 4;
    for row in 0..3 {
        let s = &ids[row * 2 * n..(row + 1) * 2 * n];
        assert_eq!(&s[..n - 1], &s[n..2 * n - 1]);
        assert_eq!((s[n - 1], s[2 * n - 1]), (4, 4));
        let t = &targets[row * 2 * n..(row + 1) * 2 * n];
        let counted: Vec<usize> = (0..2 * n).filter(|&q| t[q].is_some()).collect();
        assert_eq!(counted, vec![3, 4, 5]);
        assert_eq!(t[3], Some(s[0]));
        let probes: Vec<usize> = (0..2 * n).filter(|&q| probe[row * 2 * n + q]).collect();
        assert_eq!(probes, vec![4, 5]);
    }
}

#[test]
fn pixel_batch_is_shifted_behind_a_start_token() {
    let mut cfg = RunConfig::default();
    cfg.task = Task::ToyPixels;
    cfg.model.groups = 8;
    cfg.model.input_dim = 9;
    cfg.validate().unwrap();
    let Batch::Tokens { ids, targets, .. } = tasks::make_batch(&cfg, 2, &mut RngStream::new(3)) else {
        panic!("token batch expected")
    };
    assert_eq!(ids.len(), 128);
    for row in 0..2 {
        let (i, t) = (&ids[row * 64..(row + 1) * 64], &targets[row * 64..(row + 1) * 64]);
        assert_eq!(i[0], 8);
        for q in 1..64 {
            assert_eq!(Some(i[q]), t[q - 1]);
        }
        assert!(t.iter().all(|v| v.is_some_and(|p| p < 8)));
    }
}

#[test]
fn denoise_noise_has_the_configured_scale() {
    let mut cfg = tiny_denoise(Path::new("unused"));
    cfg.data.noise_std = 0.5;
    let Batch::Features { input, target, .. } = tasks::make_batch(&cfg, 64, &mut RngStream::new(4)) else {
        panic!("feature batch expected")
    };
    let var = input.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / input.len() as f64;
    assert!((var.sqrt() - 0.5).abs() < 0.03, "{}", var.sqrt());
}

#[test]
fn training_reduces_denoise_loss() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_denoise(&dir.path().join("run"));
    cfg.steps = 60;
    cfg.optimizer.lr = 3e-3;
    let mut t = Trainer::new(cfg).unwrap();
    let mut losses = Vec::new();
    t.run_until(60, |_, row| {
        losses.push(row.loss);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let mut t = Trainer::new(tiny_copy(dir.path())).unwrap();
    t.run_until(3, |_, _| Ok(())).unwrap();
    let bytes = checkpoint::encode(&t);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(checkpoint::encode(&back), bytes);
    assert_eq!(back.step, 3);
    assert_eq!(back.model.params, t.model.params);
    assert_eq!(back.adam, t.adam);
    assert_eq!(back.data_rng.state(), t.data_rng.state());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let dir = TempDir::new().unwrap();
    let t = Trainer::new(tiny_copy(dir.path())).unwrap();
    let bytes = checkpoint::encode(&t);
    let err = |b: &[u8]| match checkpoint::decode(b) {
        Err(CliError::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {:?}", other.map(|t| t.step)),
    };
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    assert_eq!(err(&corrupt), CheckpointError::Checksum);
    assert!(matches!(err(&bytes[..bytes.len() - 5]), CheckpointError::Truncated { .. }));
    assert!(matches!(err(&bytes[..15]), CheckpointError::Truncated { .. }));
    let mut versioned = bytes.clone();
    versioned[8] = 9;
    assert_eq!(err(&versioned), CheckpointError::Version { found: 9, expected: 1 });
    assert_eq!(err(b"not a checkpoint at all"), CheckpointError::BadMagic);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_copy(&dir.path().join("straight"));
    cfg.checkpoint_every = 6;
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    train::run(&mut straight, &cfg.out).unwrap();
    let mut resumed = checkpoint::load(&cfg.out.join("step-000006.ckpt")).unwrap();
    let out = dir.path().join("resumed");
    train::run(&mut resumed, &out).unwrap();
    assert_eq!(resumed.model.params, straight.model.params);
    let a = train::read_metrics(&cfg.out.join("metrics.csv")).unwrap();
    let b = train::read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(b.len(), 6);
    for (x, y) in a[6..].iter().zip(&b) {
        assert_eq!((x.step, x.loss.to_bits(), x.lr.to_bits()), (y.step, y.loss.to_bits(), y.lr.to_bits()));
    }
}

#[test]
fn diverging_run_aborts_with_a_diagnostic() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny_denoise(dir.path());
    cfg.optimizer.lr = 1e300;
    cfg.optimizer.warmup_steps = 0;
    cfg.optimizer.grad_clip = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    let err = t.run_until(10, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, CliError::Diverged { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn training_writes_only_inside_the_output_directory() {
    let dir = TempDir::new().unwrap();
    let cfg_dir = dir.path().join("configs");
    fs::create_dir(&cfg_dir).unwrap();
    let mut cfg = tiny_copy(&dir.path().join("out"));
    cfg.checkpoint_every = 4;
    let path = write_config(&cfg_dir, &cfg);
    let status = bin().current_dir(dir.path()).args(["train", "--config"]).arg(&path).status().unwrap();
    assert!(status.success());
    let mut top: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    top.sort();
    assert_eq!(top, ["configs", "out"]);
    assert_eq!(fs::read_dir(&cfg_dir).unwrap().count(), 1);
    let mut inside: Vec<String> = fs::read_dir(dir.path().join("out")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    inside.sort();
    assert_eq!(
        inside,
        ["eval.json", "last.ckpt", "metrics.csv", "step-000004.ckpt", "step-000008.ckpt", "step-000012.ckpt"]
    );
    let header = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(header.starts_with("step,loss,lr,tokens_per_sec\n"));
}

#[test]
fn generation_is_reproducible_and_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let mut t = Trainer::new(tiny_copy(dir.path())).unwrap();
    t.run_until(5, |_, _| Ok(())).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&t, &ckpt).unwrap();
    let run = |extra: &[&str]| {
        let out = bin()
            .args(["generate", "--checkpoint"])
            .arg(&ckpt)
            .args(["--prompt", "1,2", "--steps", "5"])
            .args(extra)
            .output()
            .unwrap();
        assert!(out.status.success());
        (String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
    };
    let (a, _) = run(&[]);
    let (b, profile) = run(&["--profile"]);
    assert_eq!(a, b);
    assert_eq!(profile.lines().count(), 6);
    let expected = generate(&t.model, &[1, 2], 5, Sampler::Greedy, 0).unwrap();
    let got: Vec<usize> = a.split_whitespace().map(|s| s.parse().unwrap()).collect();
    assert_eq!(got, expected);
    let (warm, _) = run(&["--temperature", "1.5", "--seed", "4"]);
    let (again, _) = run(&["--temperature", "1.5", "--seed", "4"]);
    assert_eq!(warm, again);
}

#[test]
fn generation_rejects_long_prompts_and_encoder_checkpoints() {
    let dir = TempDir::new().unwrap();
    let t = Trainer::new(tiny_copy(dir.path())).unwrap();
    let err = commands::generate(&t.model, &[1; 8], 1, Sampler::Greedy, 0).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let enc = Trainer::new(tiny_denoise(dir.path())).unwrap();
    let ckpt = dir.path().join("enc.ckpt");
    checkpoint::save(&enc, &ckpt).unwrap();
    let out = bin()
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--prompt", "1", "--steps", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn length_lists_parse() {
    assert_eq!(commands::parse_lengths("2^10..2^12").unwrap(), vec![1024, 2048, 4096]);
    assert_eq!(commands::parse_lengths("100, 2^3").unwrap(), vec![100, 8]);
    assert!(commands::parse_lengths("3^2").is_err());
    assert!(commands::parse_lengths("2^5..2^3").is_err());
    assert!(commands::parse_lengths("").is_err());
}

#[test]
fn analyze_emits_every_variant_at_every_length() {
    let variants: Vec<String> = ["full", "window_only", "fit"].iter().map(|s| s.to_string()).collect();
    let lengths = commands::parse_lengths("2^10..2^20").unwrap();
    let rows = commands::analyze(AnalysisSource::Preset("13b"), &lengths, &variants, &[]).unwrap();
    assert_eq!(rows.len(), 33);
    for l in &lengths {
        let get = |v: &str| rows.iter().find(|r| r.variant == v && r.l == *l).unwrap();
        assert!(get("fit").total <= 1.25 * get("window_only").total);
        let unit = CalibrationConstants::default();
        assert_eq!(get("fit").optimal_n, optimal_group_size(*l as f64, unit));
    }
}

#[test]
fn analyze_writes_csv_and_json() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("a.csv");
    let status = bin().args(["analyze", "--preset", "350m", "--L", "2^11,2^12", "--out"]).arg(&csv).status().unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("variant,L,t,n,m,layers_local,layers_global,local_attn,"));
    assert_eq!(text.lines().count(), 7);
    let out = bin().args(["analyze", "--preset", "175b", "--L", "4096", "--format", "json", "--reallocate", "0,96,192"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
}

#[test]
fn analyze_from_a_cost_config() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("cost.toml");
    fs::write(
        &path,
        "seq_len = 4096\ngroups = 2\ngroup_size = 2048\nlatents = 64\nd_local = 512\nd_global = 512\n\
         layers_local = 4\nlayers_global = 4\ncross_attn_pairs = 2\nffn_expansion = 4\ncross_ffn = true\n",
    )
    .unwrap();
    let rows = commands::analyze(AnalysisSource::Config(&path), &[1], &[], &[]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].t, 2);
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let out = bin().args(["analyze", "--preset", "7b"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_clean_and_fails_with_a_fault() {
    let clean = bin().args(["verify"]).output().unwrap();
    assert_eq!(clean.status.code(), Some(0));
    let lines = String::from_utf8(clean.stdout).unwrap();
    assert!(lines.lines().count() >= 10);
    let faulty = bin().args(["verify", "--inject", "unshifted_latents"]).output().unwrap();
    assert_eq!(faulty.status.code(), Some(1));
    let bogus = bin().args(["verify", "--inject", "nothing"]).output().unwrap();
    assert_eq!(bogus.status.code(), Some(2));
}

#[test]
fn verify_report_schema_is_stable() {
    let out = bin().args(["verify", "--seed", "3"]).output().unwrap();
    let first = String::from_utf8(out.stdout).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    // The parsed map sorts its keys, so recover the emitted order from the text.
    let mut shape: Vec<(String, &'static str)> = v
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, x)| {
            let kind = match x {
                serde_json::Value::String(_) => "string",
                serde_json::Value::Number(_) => "number",
                _ => "other",
            };
            (k.clone(), kind)
        })
        .collect();
    shape.sort_by_key(|(k, _)| first.find(&format!("\"{k}\":")).unwrap());
    let golden = [
        ("check", "string"),
        ("config", "string"),
        ("status", "string"),
        ("violation", "number"),
        ("tolerance", "number"),
        ("seed", "number"),
    ];
    assert_eq!(shape, golden.iter().map(|(k, t)| (k.to_string(), *t)).collect::<Vec<_>>());
}

#[test]
fn verify_accepts_a_run_config() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), &tiny_copy(dir.path()));
    let out = bin().args(["verify", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn bench_single_length_emits_one_row() {
    let o = BenchOptions {
        variants: vec!["fit".into()],
        lengths: vec![128],
        reps: 2,
        ..BenchOptions::default()
    };
    let report = commands::bench(&o).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].reps, 2);
    assert_eq!(report.fit_scales_better(), None);
    let mut buf = Vec::new();
    commands::write_csv(&report.rows, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("variant,L,mean_ms,std_ms,reps\n"));
}

#[test]
fn bench_rejects_sizes_over_the_memory_limit() {
    let o = BenchOptions {
        lengths: vec![1 << 16],
        ..BenchOptions::default()
    };
    let err = commands::bench(&o).unwrap_err();
    assert!(err.to_string().contains("MiB"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_subcommand_arguments_exit_with_usage_code() {
    assert_eq!(bin().args(["train"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["frobnicate"]).output().unwrap().status.code(), Some(2));
}
