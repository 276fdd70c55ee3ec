//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use fit_core::fit::{FitConfig, InputKind, Mode};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    ToyPixels,
    Denoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Decoupled decay applied to every trainable parameter.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Standard deviation of the noise added in the denoise task.
    pub noise_std: f64,
    /// Sequences drawn for the final evaluation.
    pub eval_sequences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            eval_sequences: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub out: PathBuf,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: u64,
    pub model: FitConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            batch: 16,
            steps: 1000,
            seed: 0,
            out: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            model: FitConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Pixel intensity levels in the toy image task.
pub const PIXEL_LEVELS: usize = 8;
/// Side of the toy images.
pub const PIXEL_SIDE: usize = 8;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        let o = &self.optimizer;
        if self.batch == 0 {
            return Err(bad("batch must be positive"));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.eps > 0.0) {
            return Err(bad("optimizer.lr and optimizer.eps must be positive"));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(bad("optimizer.betas must lie in [0, 1)"));
        }
        if o.weight_decay < 0.0 || o.grad_clip < 0.0 {
            return Err(bad("optimizer.weight_decay and optimizer.grad_clip must be non-negative"));
        }
        if self.data.eval_sequences == 0 || self.data.noise_std < 0.0 {
            return Err(bad("data.eval_sequences must be positive and data.noise_std non-negative"));
        }
        match self.task {
            Task::Copy => {
                if m.mode != Mode::Autoregressive || m.groups % 2 != 0 || m.prefix_overlap != 0 {
                    return Err(bad("copy needs an autoregressive model with an even group count and no overlap"));
                }
                if m.group_size < 2 || m.input_dim < 2 || m.output_dim != m.input_dim {
                    return Err(bad("copy needs group_size >= 2 and input_dim == output_dim >= 2"));
                }
            }
            Task::ToyPixels => {
                if m.mode != Mode::Autoregressive || m.max_len() < PIXEL_SIDE * PIXEL_SIDE {
                    return Err(bad("toy_pixels needs an autoregressive model holding 64 tokens"));
                }
                if m.input_dim < PIXEL_LEVELS + 1 || m.output_dim < PIXEL_LEVELS {
                    return Err(bad("toy_pixels needs input_dim >= 9 and output_dim >= 8"));
                }
            }
            Task::Denoise => {
                if m.mode != Mode::Encoder || m.input != InputKind::Features || m.output_dim != m.input_dim {
                    return Err(bad("denoise needs an encoder over features with output_dim == input_dim"));
                }
            }
        }
        Ok(())
    }
}
