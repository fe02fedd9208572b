use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{arg_err, Error, Result};
use crate::model::{Model, SIZE_MULTIPLE};
use crate::tensor::Tensor;

use super::loss::{loss_total, LossBreakdown, LossWeights};
use super::metrics::{psnr_y, ssim_y};
use super::optim::{cosine_lr, Adam};

/// A rainy image and its clean counterpart, each `1 x 3 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub rainy: Tensor,
    pub clean: Tensor,
}

/// One phase of progressive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub patch: usize,
    pub batch: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub stages: Vec<Stage>,
    pub lr_init: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 500,
            stages: vec![
                Stage { patch: 32, batch: 8, iters: 250 },
                Stage { patch: 64, batch: 4, iters: 250 },
            ],
            lr_init: 3e-4,
            lr_min: 1e-6,
            seed: 0,
            loss: LossWeights::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return arg_err("TrainConfig", "at least one stage is required");
        }
        let sum: usize = self.stages.iter().map(|s| s.iters).sum();
        if sum != self.total_iters {
            return arg_err(
                "TrainConfig",
                format!("stage iterations sum to {sum}, total_iters is {}", self.total_iters),
            );
        }
        for s in &self.stages {
            if s.patch == 0 || s.patch % SIZE_MULTIPLE != 0 {
                return arg_err(
                    "TrainConfig",
                    format!("patch size {} is not a positive multiple of {SIZE_MULTIPLE}", s.patch),
                );
            }
            if s.batch == 0 {
                return arg_err("TrainConfig", "batch size must be positive");
            }
        }
        if !(self.lr_min >= 0.0 && self.lr_init >= self.lr_min) {
            return arg_err("TrainConfig", "need lr_init >= lr_min >= 0");
        }
        if self.log_every == 0 {
            return arg_err("TrainConfig", "log_every must be positive");
        }
        self.loss.validate()
    }

    fn stage_at(&self, iter: usize) -> Stage {
        let mut end = 0;
        for s in &self.stages {
            end += s.iters;
            if iter < end {
                return *s;
            }
        }
        *self.stages.last().unwrap()
    }
}

/// Metrics of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// Number of completed iterations.
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub train_psnr: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:e} L_spa={:e} L_amp={:e} L_pha={:e} L_total={:e} train_PSNR={}",
            self.iter,
            self.lr,
            self.loss.spatial,
            self.loss.amplitude,
            self.loss.phase,
            self.loss.total,
            self.train_psnr
        )
    }
}

impl LogEntry {
    /// Parses a line produced by the `Display` impl.
    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("log field without '=': {part}")))?;
            fields.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .ok_or_else(|| Error::Malformed(format!("log line lacks {k}")))?
                .parse()
                .map_err(|_| Error::Malformed(format!("log field {k} is not a number")))
        };
        Ok(LogEntry {
            iter: num("iter")? as usize,
            lr: num("lr")?,
            loss: LossBreakdown {
                spatial: num("L_spa")?,
                amplitude: num("L_amp")?,
                phase: num("L_pha")?,
                total: num("L_total")?,
            },
            train_psnr: num("train_PSNR")?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Entries at the first iteration, every logging interval and the final iteration.
    pub log: Vec<LogEntry>,
}

/// Stateful training loop; one call to [`Trainer::step`] is one iteration.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    data: Vec<Pair>,
    rng: ChaCha8Rng,
    iter: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, data: Vec<Pair>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return arg_err("train", "training set is empty");
        }
        let max_patch = config.stages.iter().map(|s| s.patch).max().unwrap();
        for (i, p) in data.iter().enumerate() {
            p.rainy.expect_same_shape(&p.clean, "training pair")?;
            let s = p.rainy.shape();
            if s.n() != 1 || s.c() != 3 || s.h() < max_patch || s.w() < max_patch {
                return arg_err(
                    "train",
                    format!("pair {i} is {s}; need 1x3 images of at least {max_patch}x{max_patch}"),
                );
            }
        }
        let adam = Adam::new(model.store.tensors());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            adam,
            data,
            rng,
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.total_iters
    }

    fn sample_batch(&mut self, stage: Stage) -> Result<(Tensor, Tensor)> {
        let mut rainy = Vec::with_capacity(stage.batch);
        let mut clean = Vec::with_capacity(stage.batch);
        for _ in 0..stage.batch {
            let p = &self.data[self.rng.random_range(0..self.data.len())];
            let s = p.rainy.shape();
            let y0 = self.rng.random_range(0..=s.h() - stage.patch);
            let x0 = self.rng.random_range(0..=s.w() - stage.patch);
            rainy.push(p.rainy.crop(y0, x0, stage.patch, stage.patch)?);
            clean.push(p.clean.crop(y0, x0, stage.patch, stage.patch)?);
        }
        Ok((
            Tensor::stack(&rainy.iter().collect::<Vec<_>>())?,
            Tensor::stack(&clean.iter().collect::<Vec<_>>())?,
        ))
    }

    pub fn step(&mut self) -> Result<LogEntry> {
        let stage = self.config.stage_at(self.iter);
        let lr = cosine_lr(self.iter, self.config.total_iters, self.config.lr_init, self.config.lr_min);
        let (rainy, clean) = self.sample_batch(stage)?;

        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, true);
        let x = tape.constant(rainy);
        let y = self.model.forward(&mut tape, &p, x)?;
        let (loss, parts) = loss_total(&mut tape, y, &clean, self.config.loss)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", self.iter + 1)));
        }
        let train_psnr = psnr_y(tape.value(y), &clean)?;
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        drop(tape);
        self.adam
            .step(self.model.store.tensors_mut(), &grads, lr)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {}", self.iter + 1)),
                other => other,
            })?;
        self.iter += 1;
        Ok(LogEntry {
            iter: self.iter,
            lr,
            loss: parts,
            train_psnr,
        })
    }

    /// Runs the remaining iterations, passing each logged entry to `on_log`.
    pub fn run(&mut self, mut on_log: impl FnMut(&LogEntry)) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while !self.is_done() {
            let entry = self.step()?;
            if entry.iter == 1 || entry.iter % self.config.log_every == 0 || self.is_done() {
                on_log(&entry);
                report.log.push(entry);
            }
        }
        Ok(report)
    }
}

/// Trains `model` to completion and returns it with the log.
pub fn train(model: Model, config: TrainConfig, data: Vec<Pair>, on_log: impl FnMut(&LogEntry)) -> Result<(Model, TrainReport)> {
    let mut t = Trainer::new(model, config, data)?;
    let report = t.run(on_log)?;
    Ok((t.model, report))
}

/// Mean luma PSNR/SSIM of a model's restorations and of the rainy inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

pub fn evaluate(model: &Model, pairs: &[Pair]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return arg_err("evaluate", "no pairs");
    }
    let mut e = Evaluation {
        psnr: 0.0,
        ssim: 0.0,
        input_psnr: 0.0,
        input_ssim: 0.0,
    };
    for p in pairs {
        let out = model.infer(&p.rainy)?.map(|v| v.clamp(0.0, 1.0));
        e.psnr += psnr_y(&out, &p.clean)?;
        e.ssim += ssim_y(&out, &p.clean)?;
        e.input_psnr += psnr_y(&p.rainy, &p.clean)?;
        e.input_ssim += ssim_y(&p.rainy, &p.clean)?;
    }
    let n = pairs.len() as f64;
    Ok(Evaluation {
        psnr: e.psnr / n,
        ssim: e.ssim / n,
        input_psnr: e.input_psnr / n,
        input_ssim: e.input_ssim / n,
    })
}
