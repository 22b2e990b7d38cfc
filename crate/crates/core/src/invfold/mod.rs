//! Structure-conditioned sequence design on top of the frozen tokenizer.

pub mod adapter;
pub mod decoder;
pub mod frames;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::rng::{stream, uniform};
use ribosphere_tensor::{AdamW, Checkpoint, ParamStore, Tape, Var};

use crate::attention::{BlockShape, PairConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::metrics;
use crate::model::RiboModel;
use crate::structure::{AtomSet, Base, RnaStructure};
use crate::train::schedule_index;

pub use adapter::{AdapterInput, AdapterOutput, PRIOR_DIM};
pub use decoder::START_TOKEN;
pub use frames::{local_frames, LocalFrames, K_LOCAL};

pub const SWEEP_TEMPERATURES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];
pub const SWEEP_SAMPLES: usize = 16;
pub const LABEL_SMOOTHING: f64 = 0.1;

const TAG_INIT: u64 = 0x1F01;
const TAG_SAMPLE: u64 = 0x5A3E;
const TAG_SWEEP: u64 = 0x5EE9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvfoldConfig {
    pub scalar_dim: usize,
    pub vector_channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub pair_dim: usize,
    pub dist_bins: usize,
    pub dist_max: f64,
    pub relpos_clip: usize,
    pub mlp_factor: usize,
    pub rbf_dim: usize,
}

impl Default for InvfoldConfig {
    fn default() -> Self {
        Self {
            scalar_dim: 128,
            vector_channels: 16,
            blocks: 3,
            heads: 8,
            pair_dim: 16,
            dist_bins: 32,
            dist_max: 40.0,
            relpos_clip: 32,
            mlp_factor: 2,
            rbf_dim: 16,
        }
    }
}

impl InvfoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vector_channels == 0 || self.rbf_dim == 0 || self.blocks == 0 {
            return Err(Error::Config("invfold vector_channels, rbf_dim and blocks must be positive".into()));
        }
        self.block_shape().validate()?;
        self.pair_config().validate()
    }

    pub fn pair_config(&self) -> PairConfig {
        PairConfig {
            pair_dim: self.pair_dim,
            dist_bins: self.dist_bins,
            dist_max: self.dist_max,
            relpos_clip: self.relpos_clip,
        }
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.scalar_dim,
            heads: self.heads,
            pair_dim: self.pair_dim,
            mlp_factor: self.mlp_factor,
        }
    }
}

/// Tokenizer codes and backbone geometry of one design target.
#[derive(Debug, Clone, PartialEq)]
pub struct InvfoldExample {
    pub id: String,
    /// Row-major `L × code_dim`.
    pub codes: Vec<f64>,
    pub code_dim: usize,
    pub priors: Option<Vec<f64>>,
    pub frames: LocalFrames,
    pub anchors: Vec<Point>,
    pub present: Vec<bool>,
    pub sequence: Vec<Base>,
}

impl InvfoldExample {
    /// Runs the frozen tokenizer; `s` must carry the B6 atoms and the
    /// tokenizer's atom set.
    pub fn from_structure(tokenizer: &RiboModel, s: &RnaStructure) -> Result<Self> {
        let tokens = tokenizer.tokenize(s)?;
        Self::from_codes(s, tokens.quantized, tokenizer.fsq().dim())
    }

    pub fn from_codes(s: &RnaStructure, codes: Vec<f64>, code_dim: usize) -> Result<Self> {
        if codes.len() != s.len() * code_dim {
            return Err(Error::LengthMismatch(codes.len(), s.len() * code_dim));
        }
        let b6 = s.to_atom_set(AtomSet::B6)?;
        let frames = local_frames(&b6)?;
        let (anchors, present) = b6.c4_trace();
        Ok(Self {
            id: s.id.clone(),
            codes,
            code_dim,
            priors: None,
            frames,
            anchors,
            present,
            sequence: s.sequence.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn adapter_input(&self) -> AdapterInput<'_> {
        AdapterInput {
            codes: &self.codes,
            code_dim: self.code_dim,
            priors: self.priors.as_deref(),
            vectors: &self.frames.vectors,
            anchors: &self.anchors,
            present: &self.present,
        }
    }

    /// The first `n` residues.
    pub fn prefix(&self, n: usize) -> Self {
        let f = &self.frames;
        Self {
            id: self.id.clone(),
            codes: self.codes[..n * self.code_dim].to_vec(),
            code_dim: self.code_dim,
            priors: self.priors.as_ref().map(|p| p[..n * PRIOR_DIM].to_vec()),
            frames: LocalFrames {
                frames: f.frames[..n].to_vec(),
                vectors: f.vectors[..n * K_LOCAL * 3].to_vec(),
                mask: f.mask[..n].to_vec(),
            },
            anchors: self.anchors[..n].to_vec(),
            present: self.present[..n].to_vec(),
            sequence: self.sequence[..n].to_vec(),
        }
    }
}

/// Previous-nucleotide inputs for teacher forcing.
pub fn teacher_forcing_inputs(seq: &[Base]) -> Vec<usize> {
    std::iter::once(START_TOKEN).chain(seq.iter().take(seq.len().saturating_sub(1)).map(|b| b.index())).collect()
}

/// Label-smoothed cross-entropy over 4-way logits `[L, 4]`, returning
/// `(sum over positions, per-position mean)`.
pub fn label_smooth_ce(tape: &mut Tape, logits: Var, targets: &[usize], eps: f64) -> Result<(Var, Var)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != decoder::VOCAB || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::Invalid(format!("label_smooth_ce: logits {shape:?} for {} targets", targets.len())));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Invalid(format!("label smoothing {eps} outside [0, 1]")));
    }
    let v = decoder::VOCAB;
    let mut w = vec![eps / v as f64; targets.len() * v];
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Invalid(format!("target {t} outside vocabulary")));
        }
        w[i * v + t] += 1.0 - eps;
    }
    let w = tape.constant(shape, w)?;
    let lp = tape.log_softmax(logits)?;
    let prod = tape.mul(lp, w)?;
    let s = tape.sum(prod)?;
    let total = tape.scale(s, -1.0)?;
    let mean = tape.scale(total, 1.0 / targets.len() as f64)?;
    Ok((total, mean))
}

/// Draws an index from `softmax(logits / T)`; `T == 0` is argmax with ties
/// to the lowest index.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Invalid("sampling from empty logits".into()));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = logits.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    let u = uniform(rng) * total;
    let mut acc = 0.0;
    for (i, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.iter().rposition(|x| *x > 0.0).unwrap_or(0))
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

fn to_bases(idx: &[usize]) -> Vec<Base> {
    idx.iter().map(|&i| Base::from_index(i).expect("index below 4")).collect()
}

pub struct InvfoldModel {
    pub config: InvfoldConfig,
    pub code_dim: usize,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    invfold: InvfoldConfig,
    code_dim: usize,
}

impl InvfoldModel {
    pub fn new(config: InvfoldConfig, code_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if code_dim == 0 {
            return Err(Error::Config("code_dim must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = stream(seed, &[TAG_INIT]);
        adapter::init_adapter(&mut params, &config, code_dim, &mut rng);
        decoder::init_decoder(&mut params, &config, &mut rng);
        Ok(Self { config, code_dim, params })
    }

    fn check(&self, ex: &InvfoldExample) -> Result<()> {
        if ex.code_dim != self.code_dim {
            return Err(Error::Invalid(format!("example code_dim {} but model expects {}", ex.code_dim, self.code_dim)));
        }
        Ok(())
    }

    pub fn logits_on_tape(&self, tape: &mut Tape, ex: &InvfoldExample, prev: &[usize]) -> Result<Var> {
        self.check(ex)?;
        if prev.len() != ex.len() {
            return Err(Error::LengthMismatch(prev.len(), ex.len()));
        }
        let geo = adapter::adapter(tape, &self.params, &self.config, &ex.adapter_input())?;
        decoder::decoder_logits(tape, &self.params, &self.config, geo, &ex.anchors, &ex.present, prev)
    }

    /// Row-major `L × 4` logits.
    pub fn logits(&self, ex: &InvfoldExample, prev: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits_on_tape(&mut tape, ex, prev)?;
        Ok(tape.value(l).to_vec())
    }

    /// Argmax predictions given the true prefix at every position.
    pub fn teacher_forced(&self, ex: &InvfoldExample) -> Result<Vec<Base>> {
        let logits = self.logits(ex, &teacher_forcing_inputs(&ex.sequence))?;
        Ok(to_bases(&logits.chunks(decoder::VOCAB).map(argmax).collect::<Vec<_>>()))
    }

    pub fn teacher_forced_recovery(&self, ex: &InvfoldExample) -> Result<f64> {
        metrics::recovery(&self.teacher_forced(ex)?, &ex.sequence)
    }

    /// 5′→3′ generation; position `i` is predicted from the first `i + 1`
    /// residues of geometry and the `i` nucleotides already drawn.
    pub fn sample<R: Rng + ?Sized>(&self, ex: &InvfoldExample, temperature: f64, rng: &mut R) -> Result<Vec<Base>> {
        self.check(ex)?;
        let mut prev = vec![START_TOKEN];
        let mut out = Vec::with_capacity(ex.len());
        for i in 0..ex.len() {
            let logits = self.logits(&ex.prefix(i + 1), &prev)?;
            let tok = sample_token(&logits[i * decoder::VOCAB..], temperature, rng)?;
            out.push(tok);
            prev.push(tok);
        }
        Ok(to_bases(&out))
    }

    pub fn loss_on_tape(&self, tape: &mut Tape, ex: &InvfoldExample, eps: f64) -> Result<(Var, Var)> {
        let logits = self.logits_on_tape(tape, ex, &teacher_forcing_inputs(&ex.sequence))?;
        let targets: Vec<usize> = ex.sequence.iter().map(|b| b.index()).collect();
        label_smooth_ce(tape, logits, &targets, eps)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&Meta {
            invfold: self.config.clone(),
            code_dim: self.code_dim,
        })?;
        let mut ck = Checkpoint::new(meta);
        ck.add_store("invfold_model.", &self.params)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&ck.metadata)?;
        let fresh = Self::new(meta.invfold, meta.code_dim, 0)?;
        let mut params = ck.store("invfold_model.");
        for (name, t) in fresh.params.iter() {
            let got = params.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Format("checkpoint has unexpected invfold tensors".into()));
        }
        params.set_trainable("", true);
        Ok(Self { params, ..fresh })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvfoldTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch: usize,
    pub label_smoothing: f64,
    pub grad_clip: Option<f64>,
    pub log_every: u64,
}

impl Default for InvfoldTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            steps: 2000,
            batch: 4,
            label_smoothing: LABEL_SMOOTHING,
            grad_clip: Some(1.0),
            log_every: 50,
        }
    }
}

impl InvfoldTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("invfold training needs lr > 0, batch > 0, label_smoothing in [0, 1)".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvfoldLogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

impl InvfoldLogRow {
    pub const HEADER: &'static str = "step\tce_loss\tgrad_norm";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.6e}\t{:.6e}", self.step, self.loss, self.grad_norm)
    }
}

/// Trains adapter and decoder; tokenizer outputs enter only as constants.
pub struct InvfoldTrainer {
    pub model: InvfoldModel,
    pub opt: AdamW,
    pub cfg: InvfoldTrainConfig,
    pub seed: u64,
}

impl InvfoldTrainer {
    pub fn new(model: InvfoldModel, cfg: InvfoldTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.lr, cfg.weight_decay);
        Ok(Self { model, opt, cfg, seed })
    }

    pub fn step(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn train_step(&mut self, examples: &[InvfoldExample]) -> Result<InvfoldLogRow> {
        if examples.is_empty() {
            return Err(Error::Invalid("inverse folding training set is empty".into()));
        }
        let step = self.step();
        let batch = self.cfg.batch as u64;
        let mut total = 0.0;
        self.model.params.zero_grads();
        for b in 0..batch {
            let ex = &examples[schedule_index(self.seed, examples.len(), step * batch + b)];
            let mut tape = Tape::new();
            let (_, mean) = self.model.loss_on_tape(&mut tape, ex, self.cfg.label_smoothing)?;
            total += tape.scalar(mean)?;
            tape.backward(mean)?;
            tape.accumulate_into(&mut self.model.params)?;
        }
        self.model.params.scale_grads(1.0 / batch as f64);
        let grad_norm = self.model.params.grad_norm();
        if let Some(c) = self.cfg.grad_clip {
            if grad_norm > c {
                self.model.params.scale_grads(c / grad_norm);
            }
        }
        self.opt.step(&mut self.model.params)?;
        self.model.params.zero_grads();
        self.model.params.check_finite()?;
        Ok(InvfoldLogRow {
            step: self.step(),
            loss: total / batch as f64,
            grad_norm,
        })
    }

    pub fn run(
        &mut self,
        examples: &[InvfoldExample],
        total: u64,
        mut on_step: impl FnMut(&InvfoldTrainer, &InvfoldLogRow) -> Result<()>,
    ) -> Result<Vec<InvfoldLogRow>> {
        let mut rows = Vec::new();
        while self.step() < total {
            let row = self.train_step(examples)?;
            on_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// One designed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub id: String,
    pub temperature: f64,
    pub sample: usize,
    pub sequence: Vec<Base>,
}

/// `n` samples per example at temperature `T`; sample `k` of example `e` uses
/// its own stream so results do not depend on thread scheduling.
pub fn design(model: &InvfoldModel, examples: &[InvfoldExample], temperature: f64, n: usize, seed: u64) -> Result<Vec<Design>> {
    let per: Vec<Vec<Design>> = examples
        .par_iter()
        .enumerate()
        .map(|(e, ex)| {
            (0..n)
                .map(|k| {
                    let mut rng = stream(seed, &[TAG_SAMPLE, temperature.to_bits(), e as u64, k as u64]);
                    Ok(Design {
                        id: ex.id.clone(),
                        temperature,
                        sample: k,
                        sequence: model.sample(ex, temperature, &mut rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn write_fasta(designs: &[Design]) -> String {
    let mut out = String::new();
    for d in designs {
        out.push_str(&format!(
            ">{} T={} sample={}\n{}\n",
            d.id,
            d.temperature,
            d.sample,
            crate::structure::sequence_string(&d.sequence)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub recovery_mean: f64,
    pub recovery_best: f64,
    pub diversity: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "temperature\trecovery_mean\trecovery_best\tdiversity";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6}", self.temperature, self.recovery_mean, self.recovery_best, self.diversity)
    }
}

/// Recovery (mean and best of `samples`) and 3-mer diversity per temperature,
/// each averaged over examples.
pub fn tradeoff_sweep(
    model: &InvfoldModel,
    examples: &[InvfoldExample],
    temperatures: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if examples.is_empty() {
        return Err(Error::Invalid("sweep over an empty structure set".into()));
    }
    if samples < 2 {
        return Err(Error::Invalid("sweep needs at least two samples per structure".into()));
    }
    let mut rows = Vec::with_capacity(temperatures.len());
    for (ti, &t) in temperatures.iter().enumerate() {
        let designs = design(model, examples, t, samples, stream(seed, &[TAG_SWEEP, ti as u64]).random())?;
        let (mut mean, mut best, mut div) = (0.0, 0.0, 0.0);
        for (e, ex) in examples.iter().enumerate() {
            let seqs: Vec<Vec<Base>> = designs[e * samples..(e + 1) * samples].iter().map(|d| d.sequence.clone()).collect();
            let rec = seqs.iter().map(|s| metrics::recovery(s, &ex.sequence)).collect::<Result<Vec<_>>>()?;
            mean += rec.iter().sum::<f64>() / samples as f64;
            best += rec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            div += metrics::diversity_3mer(&seqs).unwrap_or(0.0);
        }
        let n = examples.len() as f64;
        rows.push(SweepRow {
            temperature: t,
            recovery_mean: mean / n,
            recovery_best: best / n,
            diversity: div / n,
        });
    }
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from(SweepRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}
