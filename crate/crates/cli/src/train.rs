//! Training loop and run directory layout.
//!
//! A run directory holds `metrics.csv`, `step-NNNNNN.ckpt` snapshots,
//! `last.ckpt` and `eval.json`. Nothing outside it is written.

use std::fs::{self, OpenOptions};
use std::path::Path;
use std::time::Instant;

use fit_core::fit::FitModel;
use fit_core::nn::Session;
use fit_core::rng::RngStream;
use fit_core::Graph;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};
use crate::optim::{learning_rate, Adam};
use crate::tasks::{self, Evaluation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: FitModel,
    pub adam: Adam,
    /// Updates applied so far.
    pub step: u64,
    /// Stream the next training batch is drawn from.
    pub data_rng: RngStream,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model_cfg = config.model.clone();
        model_cfg.seed = config.seed;
        let model = FitModel::new(model_cfg)?;
        let adam = Adam::new(&model.params);
        let data_rng = RngStream::new(config.seed).split("data");
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            data_rng,
        })
    }

    /// One optimizer update on a fresh batch.
    pub fn train_step(&mut self) -> Result<MetricRow> {
        let started = Instant::now();
        let batch = tasks::make_batch(&self.config, self.config.batch, &mut self.data_rng);
        let graph = Graph::new();
        let (loss, grads) = {
            let s = Session::training(&self.model.params, &graph);
            let loss = tasks::loss(&self.model, &s, &batch)?;
            let grads = s.param_grads(&loss.backward()?);
            (loss.item()?, grads)
        };
        if !loss.is_finite() {
            return Err(CliError::Diverged {
                step: self.step + 1,
                loss,
            });
        }
        let lr = learning_rate(&self.config.optimizer, self.step, self.config.steps);
        self.adam.update(&mut self.model.params, &grads, lr, &self.config.optimizer);
        self.step += 1;
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok(MetricRow {
            step: self.step,
            loss: tasks::report_loss(self.config.task, loss),
            lr,
            tokens_per_sec: batch.positions() as f64 / secs,
        })
    }

    /// Trains up to `until` updates, calling `sink` after each one.
    pub fn run_until(&mut self, until: u64, mut sink: impl FnMut(&Self, &MetricRow) -> Result<()>) -> Result<()> {
        while self.step < until {
            let row = self.train_step()?;
            sink(self, &row)?;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        tasks::evaluate(&self.model, &self.config, self.config.seed)
    }
}

/// Trains to the configured step count inside `out`, appending to an
/// existing metrics file when resuming. Returns the final evaluation.
pub fn run(trainer: &mut Trainer, out: &Path) -> Result<Evaluation> {
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    let metrics_path = out.join("metrics.csv");
    let resuming = trainer.step > 0 && metrics_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&metrics_path)
        .map_err(io_err(format!("opening {}", metrics_path.display())))?;
    let mut writer = csv::WriterBuilder::new().has_headers(!resuming).from_writer(file);
    let every = trainer.config.checkpoint_every;
    let total = trainer.config.steps;
    trainer.run_until(total, |t, row| {
        writer.serialize(row)?;
        if every > 0 && t.step % every == 0 {
            writer.flush().map_err(io_err("writing metrics"))?;
            checkpoint::save(t, &out.join(format!("step-{:06}.ckpt", t.step)))?;
        }
        Ok(())
    })?;
    writer.flush().map_err(io_err("writing metrics"))?;
    checkpoint::save(trainer, &out.join("last.ckpt"))?;
    let eval = trainer.evaluate()?;
    let json = serde_json::to_string_pretty(&eval).expect("evaluation serializes");
    fs::write(out.join("eval.json"), json + "\n").map_err(io_err("writing eval.json"))?;
    Ok(eval)
}

/// Reads a metrics file written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(CliError::from)).collect()
}
