//! Reconstruction training loop: flow loss through the tokenizer with
//! gradient accumulation, rotation augmentation and exact resumption.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::rng::stream;
use ribosphere_tensor::{AdamW, Checkpoint, Tape, Tensor};

use crate::decoder::{self, FlowExample};
use crate::error::{Error, Result};
use crate::flow::project_zero_com;
use crate::geometry::{self, Point};
use crate::model::{ModelConfig, RiboModel};
use crate::structure::{mean_center, random_rotation, RnaStructure};

const TAG_EPOCH: u64 = 0xE90C;
const TAG_MICRO: u64 = 0x313C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub accumulation: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub cond_drop: f64,
    pub augment: bool,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    pub checkpoint_every: Option<usize>,
    pub lr_schedule: LrSchedule,
}

/// Learning-rate multiplier as a function of the optimiser step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up over `warmup` steps, then cosine decay to zero at the
    /// final step.
    Cosine { warmup: usize },
}

impl LrSchedule {
    /// Multiplier for the update that produces step `step + 1` of `total`.
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup } => {
                let k = step as f64 + 1.0;
                if (step as usize) < warmup {
                    return k / warmup as f64;
                }
                let span = total.saturating_sub(warmup as u64).max(1) as f64;
                let p = ((k - warmup as f64) / span).clamp(0.0, 1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.0,
            accumulation: 8,
            epochs: 100,
            max_steps: None,
            cond_drop: 0.1,
            augment: true,
            grad_clip: Some(1.0),
            log_every: 10,
            checkpoint_every: None,
            lr_schedule: LrSchedule::Cosine { warmup: 100 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config(format!("cond_drop {} outside [0, 1]", self.cond_drop)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Optimiser steps for a corpus of `n` structures.
    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.epochs * n.div_ceil(self.accumulation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\tflow_loss\tgrad_norm\tlr";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.6e}\t{:.6e}\t{:.3e}", self.step, self.loss, self.grad_norm, self.lr)
    }
}

/// Index of the structure used at global micro-step `k`: a fresh seeded
/// permutation of the corpus every epoch.
pub fn schedule_index(seed: u64, n: usize, k: u64) -> usize {
    let epoch = k / n as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, &[TAG_EPOCH, epoch]));
    perm[(k % n as u64) as usize]
}

/// Zero-CoM normalised coordinates of a centred structure.
pub fn normalised_target(s: &RnaStructure, coord_scale: f64) -> Vec<Point> {
    let mut x: Vec<Point> = s.coords.iter().map(|p| geometry::scale(*p, 1.0 / coord_scale)).collect();
    project_zero_com(&mut x);
    x
}

pub struct Trainer {
    pub model: RiboModel,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: RiboModel, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Ok(Self { model, opt, cfg, seed })
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }

    /// Flow loss of one micro-step, with gradients accumulated into the model.
    fn micro_step(&mut self, s: &RnaStructure, rng: &mut ribosphere_tensor::rng::SeededRng) -> Result<f64> {
        let cfg = &self.model.config;
        let s = mean_center(&self.model.prepare(s)?)?;
        let s = if self.cfg.augment { random_rotation(&s, rng) } else { s };
        let x1 = normalised_target(&s, cfg.coord_scale);
        let mut tape = Tape::new();
        let (_, _, q) = self.model.tokenize_on_tape(&mut tape, &s)?;
        let ex = FlowExample {
            x1: &x1,
            mask: &s.mask,
            residues: s.len(),
            atoms: cfg.atom_set.len(),
            anchor_slot: cfg.atom_set.c4_index(),
            coord_scale: cfg.coord_scale,
        };
        let loss = decoder::flow_loss(&mut tape, &self.model.params, &cfg.decoder, &ex, q, self.cfg.cond_drop, rng)?;
        let value = tape.scalar(loss)?;
        tape.backward(loss)?;
        tape.accumulate_into(&mut self.model.params)?;
        Ok(value)
    }

    /// One optimiser step over `accumulation` micro-steps.
    pub fn train_step(&mut self, corpus: &[RnaStructure]) -> Result<LogRow> {
        if corpus.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        let step = self.step();
        let accum = self.cfg.accumulation as u64;
        let mut total = 0.0;
        self.model.params.zero_grads();
        for micro in 0..accum {
            let idx = schedule_index(self.seed, corpus.len(), step * accum + micro);
            let mut rng = stream(self.seed, &[TAG_MICRO, step, micro]);
            total += self.micro_step(&corpus[idx], &mut rng)?;
        }
        self.model.params.scale_grads(1.0 / accum as f64);
        let grad_norm = self.model.params.grad_norm();
        let planned = self.cfg.total_steps(corpus.len()) as u64;
        self.opt.lr = self.cfg.lr * self.cfg.lr_schedule.factor(step, planned);
        if let Some(c) = self.cfg.grad_clip {
            if grad_norm > c {
                self.model.params.scale_grads(c / grad_norm);
            }
        }
        self.opt.step(&mut self.model.params)?;
        self.model.params.zero_grads();
        self.model.params.check_finite()?;
        Ok(LogRow {
            step: self.step(),
            loss: total / accum as f64,
            grad_norm,
            lr: self.opt.lr,
        })
    }

    /// Runs until `total` optimiser steps have been taken.
    pub fn run(&mut self, corpus: &[RnaStructure], total: u64, mut on_step: impl FnMut(&Trainer, &LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.step() < total {
            let row = self.train_step(corpus)?;
            on_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Model weights, optimiser moments and the step counter.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "model": self.model.config,
            "train": self.cfg,
            "seed": self.seed,
            "step": self.step(),
        });
        let mut ck = Checkpoint::new(meta.to_string());
        ck.add_store("model.", &self.model.params)?;
        for (name, m, v) in self.opt.state() {
            ck.tensors.insert(format!("optim.m.{name}"), Tensor::from_vec(m.clone()));
            ck.tensors.insert(format!("optim.v.{name}"), Tensor::from_vec(v.clone()));
        }
        Ok(ck)
    }

    /// Restores a trainer. `cfg` replaces the stored training config when given.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&ck.metadata)?;
        let model = RiboModel::from_checkpoint(ck)?;
        let stored: Option<TrainConfig> = meta.get("train").map(|v| serde_json::from_value(v.clone())).transpose()?;
        let cfg = cfg.or(stored).unwrap_or_default();
        let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let step = meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut moments = BTreeMap::new();
        for (name, t) in &ck.tensors {
            if let Some(p) = name.strip_prefix("optim.m.") {
                let v = ck
                    .tensors
                    .get(&format!("optim.v.{p}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks second moment for {p}")))?;
                moments.insert(p.to_string(), (t.data().to_vec(), v.data().to_vec()));
            }
        }
        let mut trainer = Trainer::new(model, cfg, seed)?;
        trainer.opt.restore(step, moments);
        Ok(trainer)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}
