//! Synthetic training tasks.
//!
//! * `copy`: each pair of groups holds `n - 1` random symbols and a
//!   delimiter, then the same symbols and a delimiter again. The loss counts
//!   the predictions of the repeated symbols. Those made from inside the
//!   second group (the probe positions) can only be solved by reading the
//!   first group through the latents.
//! * `toy_pixels`: 8x8 images with 8 intensity levels, flattened row by row
//!   behind a start token. Loss is in bits per dimension.
//! * `denoise`: sums of random sinusoids plus Gaussian noise; an encoder
//!   regresses the clean signal under mean squared error.

use std::f64::consts::{LN_2, TAU};

use fit_core::fit::{ar_loss, FitModel, Input};
use fit_core::nn::Session;
use fit_core::rng::RngStream;
use fit_core::Tensor;
use serde::Serialize;

use crate::config::{RunConfig, Task, PIXEL_LEVELS, PIXEL_SIDE};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Tokens {
        rows: usize,
        ids: Vec<usize>,
        targets: Vec<Option<usize>>,
        /// Positions counted in the probe loss.
        probe: Vec<bool>,
    },
    Features {
        rows: usize,
        len: usize,
        input: Vec<f64>,
        target: Vec<f64>,
    },
}

impl Batch {
    /// Flat tokens or time steps in the batch.
    pub fn positions(&self) -> usize {
        match self {
            Batch::Tokens { ids, .. } => ids.len(),
            Batch::Features { rows, len, .. } => rows * len,
        }
    }
}

pub fn sequence_len(cfg: &RunConfig) -> usize {
    match cfg.task {
        Task::ToyPixels => PIXEL_SIDE * PIXEL_SIDE,
        Task::Copy | Task::Denoise => cfg.model.max_len(),
    }
}

fn copy_row(cfg: &RunConfig, rng: &mut RngStream, out: &mut Batch) {
    let Batch::Tokens { ids, targets, probe, .. } = out else { unreachable!() };
    let m = &cfg.model;
    let (n, symbols) = (m.group_size, m.input_dim - 1);
    let delim = symbols;
    let start = ids.len();
    for _ in 0..m.groups / 2 {
        let content: Vec<usize> = (0..n - 1).map(|_| rng.below(symbols)).collect();
        for _ in 0..2 {
            ids.extend(&content);
            ids.push(delim);
        }
    }
    let len = m.groups * n;
    for q in 0..len {
        let in_pair = q % (2 * n);
        let counted = (n - 1..2 * n - 2).contains(&in_pair);
        targets.push(counted.then(|| ids[start + q + 1]));
        probe.push(counted && in_pair >= n);
    }
}

fn pixel_row(rng: &mut RngStream, out: &mut Batch) {
    let Batch::Tokens { ids, targets, probe, .. } = out else { unreachable!() };
    let levels = PIXEL_LEVELS as f64;
    let base = rng.uniform() * levels;
    let gx = rng.below(3) as f64 - 1.0;
    let gy = rng.below(3) as f64 - 1.0;
    let (x0, y0) = (rng.below(PIXEL_SIDE), rng.below(PIXEL_SIDE));
    let (x1, y1) = (x0 + 1 + rng.below(PIXEL_SIDE - x0), y0 + 1 + rng.below(PIXEL_SIDE - y0));
    let fill = rng.below(PIXEL_LEVELS);
    let mut pixels = Vec::with_capacity(PIXEL_SIDE * PIXEL_SIDE);
    for y in 0..PIXEL_SIDE {
        for x in 0..PIXEL_SIDE {
            let v = if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                fill
            } else {
                (base + 0.5 * gx * x as f64 + 0.5 * gy * y as f64).clamp(0.0, levels - 1.0) as usize
            };
            pixels.push(v);
        }
    }
    ids.push(PIXEL_LEVELS);
    ids.extend(&pixels[..pixels.len() - 1]);
    targets.extend(pixels.iter().map(|&p| Some(p)));
    probe.extend(std::iter::repeat_n(false, pixels.len()));
}

fn denoise_row(cfg: &RunConfig, rng: &mut RngStream, out: &mut Batch) {
    let Batch::Features { len, input, target, .. } = out else { unreachable!() };
    let c = cfg.model.input_dim;
    let waves: Vec<[f64; 3]> = (0..3 * c)
        .map(|_| [rng.normal() / 3f64.sqrt(), 0.5 + 3.5 * rng.uniform(), TAU * rng.uniform()])
        .collect();
    for i in 0..*len {
        let x = i as f64 / *len as f64;
        for ch in 0..c {
            let clean: f64 = waves[3 * ch..3 * ch + 3]
                .iter()
                .map(|[a, f, phase]| a * (TAU * f * x + phase).sin())
                .sum();
            target.push(clean);
            input.push(clean + cfg.data.noise_std * rng.normal());
        }
    }
}

/// Draws `rows` sequences from `rng`.
pub fn make_batch(cfg: &RunConfig, rows: usize, rng: &mut RngStream) -> Batch {
    let len = sequence_len(cfg);
    let mut batch = match cfg.task {
        Task::Copy | Task::ToyPixels => Batch::Tokens {
            rows,
            ids: Vec::with_capacity(rows * len),
            targets: Vec::with_capacity(rows * len),
            probe: Vec::with_capacity(rows * len),
        },
        Task::Denoise => Batch::Features {
            rows,
            len,
            input: Vec::new(),
            target: Vec::new(),
        },
    };
    for _ in 0..rows {
        match cfg.task {
            Task::Copy => copy_row(cfg, rng, &mut batch),
            Task::ToyPixels => pixel_row(rng, &mut batch),
            Task::Denoise => denoise_row(cfg, rng, &mut batch),
        }
    }
    batch
}

/// Model outputs for a batch and the matching per-slot targets.
struct Outputs {
    out: Tensor,
    slot_targets: Vec<Option<usize>>,
    slot_probe: Vec<bool>,
    slot_values: Vec<f64>,
    slot_weights: Vec<f64>,
}

fn run(model: &FitModel, s: &Session<'_>, batch: &Batch) -> Result<Outputs> {
    match batch {
        Batch::Tokens { rows, ids, targets, probe } => {
            let (layout, out) = model.predict(s, Input::Tokens { ids, batch: *rows })?;
            let len = ids.len() / rows;
            let mut slot_targets = Vec::new();
            let mut slot_probe = Vec::new();
            for r in 0..*rows {
                slot_targets.extend(layout.arrange(&targets[r * len..(r + 1) * len], None));
                slot_probe.extend(layout.arrange(&probe[r * len..(r + 1) * len], false));
            }
            Ok(Outputs {
                out,
                slot_targets,
                slot_probe,
                slot_values: Vec::new(),
                slot_weights: Vec::new(),
            })
        }
        Batch::Features { rows, len, input, target } => {
            let c = model.config.input_dim;
            let x = Tensor::new(&[*rows, *len, c], input.clone())?;
            let (layout, out) = model.predict(s, Input::Features(&x))?;
            let mut slot_values = Vec::with_capacity(out.numel());
            let mut slot_weights = Vec::with_capacity(out.numel());
            let positions: Vec<Option<usize>> = (0..*len).map(Some).collect();
            let arranged = layout.arrange(&positions, None);
            for r in 0..*rows {
                for slot in &arranged {
                    match slot {
                        Some(q) => {
                            let at = (r * len + q) * c;
                            slot_values.extend(&target[at..at + c]);
                            slot_weights.extend(std::iter::repeat_n(1.0, c));
                        }
                        None => {
                            slot_values.extend(std::iter::repeat_n(0.0, c));
                            slot_weights.extend(std::iter::repeat_n(0.0, c));
                        }
                    }
                }
            }
            Ok(Outputs {
                out,
                slot_targets: Vec::new(),
                slot_probe: Vec::new(),
                slot_values,
                slot_weights,
            })
        }
    }
}

/// Training objective: cross-entropy in nats or mean squared error.
pub fn loss(model: &FitModel, s: &Session<'_>, batch: &Batch) -> Result<Tensor> {
    let o = run(model, s, batch)?;
    Ok(match batch {
        Batch::Tokens { .. } => ar_loss(&o.out, &o.slot_targets, model.config.prefix_overlap)?,
        Batch::Features { .. } => o.out.mse(&o.slot_values, Some(&o.slot_weights))?,
    })
}

/// Converts a training loss into the unit the task reports.
pub fn report_loss(task: Task, loss: f64) -> f64 {
    match task {
        Task::ToyPixels => loss / LN_2,
        Task::Copy | Task::Denoise => loss,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub task: Task,
    pub sequences: usize,
    /// Mean loss in the task's reporting unit.
    pub loss: f64,
    /// Mean cross-entropy at probe positions, in nats.
    pub probe_loss: Option<f64>,
    /// Probe loss of a predictor that ignores everything outside the group.
    pub probe_floor: Option<f64>,
}

fn row_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + z.ln() - row[target]
}

/// Held-out evaluation on sequences drawn from a stream independent of
/// training.
pub fn evaluate(model: &FitModel, cfg: &RunConfig, seed: u64) -> Result<Evaluation> {
    let mut rng = RngStream::new(seed).split("eval");
    let s = Session::inference(&model.params);
    let (mut total, mut count, mut probe_total, mut probe_count) = (0.0, 0usize, 0.0, 0usize);
    let mut left = cfg.data.eval_sequences;
    while left > 0 {
        let rows = left.min(cfg.batch.max(32));
        left -= rows;
        let batch = make_batch(cfg, rows, &mut rng);
        let o = run(model, &s, &batch)?;
        match batch {
            Batch::Tokens { .. } => {
                let v = model.config.output_dim;
                let p = model.config.prefix_overlap;
                let (t, n) = (o.out.shape()[1], o.out.shape()[2]);
                for (k, tg) in o.slot_targets.iter().enumerate() {
                    let slot = k % (t * n);
                    let Some(tg) = tg else { continue };
                    if slot / n > 0 && slot % n < p {
                        continue;
                    }
                    let nll = row_nll(&o.out.data()[k * v..(k + 1) * v], *tg);
                    total += nll;
                    count += 1;
                    if o.slot_probe[k] {
                        probe_total += nll;
                        probe_count += 1;
                    }
                }
            }
            Batch::Features { .. } => {
                for ((y, t), w) in o.out.data().iter().zip(&o.slot_values).zip(&o.slot_weights) {
                    total += w * (y - t) * (y - t);
                    count += *w as usize;
                }
            }
        }
    }
    let loss = report_loss(cfg.task, total / count.max(1) as f64);
    let copy = cfg.task == Task::Copy;
    Ok(Evaluation {
        task: cfg.task,
        sequences: cfg.data.eval_sequences,
        loss,
        probe_loss: (probe_count > 0).then(|| probe_total / probe_count as f64),
        probe_floor: copy.then(|| ((cfg.model.input_dim - 1) as f64).ln()),
    })
}
