#![allow(dead_code)]
//! Independent reference routines and fixtures shared by the integration
//! tests and the acceptance run.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use ribosphere::decoder::{self, DecoderConfig, FieldInput};
use ribosphere::encoder::{self, EncoderConfig};
use ribosphere::flow::{self, FlowField, SamplerConfig};
use ribosphere::invfold::{adapter, InvfoldConfig, InvfoldExample, InvfoldModel};
use ribosphere::model::{ModelConfig, RiboModel};
use ribosphere::pipeline::{self, Context, RunConfig, SplitSel, SynthConfig};
use ribosphere::synth::synth_helix;
use ribosphere::geometry::Point;
use ribosphere::train::LrSchedule;
use ribosphere::{AtomSet, Result, RnaStructure};
use ribosphere_tensor::gradcheck::{check, GradCheckReport};
use ribosphere_tensor::opcheck::project;
use ribosphere_tensor::TensorError;
use ribosphere_tensor::rng::{normal, seeded, uniform};

pub type M3 = [[f64; 3]; 3];

// ---------------------------------------------------------------------------
// Superposition by Horn's unit quaternion method, eigenvector by Jacobi.

/// Eigen-decomposition of a symmetric 4×4 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and eigenvectors as columns.
pub fn jacobi4(mut a: [[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..4).flat_map(|i| (0..4).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2], a[3][3]], v)
}

fn mean(p: &[Point]) -> Point {
    let n = p.len() as f64;
    let mut c = [0.0; 3];
    for q in p {
        for k in 0..3 {
            c[k] += q[k] / n;
        }
    }
    c
}

/// Rotation `R` and translation `t` minimising `Σ‖R a_i + t − b_i‖²`.
pub fn horn(a: &[Point], b: &[Point]) -> (M3, Point) {
    let ca = mean(a);
    let cb = mean(b);
    let mut s = [[0.0; 3]; 3];
    for (p, q) in a.iter().zip(b) {
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += (p[i] - ca[i]) * (q[j] - cb[j]);
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (vals, vecs) = jacobi4(n);
    let best = (0..4).max_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
    let q: Vec<f64> = (0..4).map(|k| vecs[k][best]).collect();
    let (q0, q1, q2, q3) = (q[0], q[1], q[2], q[3]);
    let r = [
        [q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2.0 * (q1 * q2 - q0 * q3), 2.0 * (q1 * q3 + q0 * q2)],
        [2.0 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2.0 * (q2 * q3 - q0 * q1)],
        [2.0 * (q1 * q3 - q0 * q2), 2.0 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3],
    ];
    let rc = rot(&r, ca);
    (r, [cb[0] - rc[0], cb[1] - rc[1], cb[2] - rc[2]])
}

pub fn rot(r: &M3, p: Point) -> Point {
    [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

pub fn moved(r: &M3, t: Point, pts: &[Point]) -> Vec<Point> {
    pts.iter().map(|p| {
        let q = rot(r, *p);
        [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
    }).collect()
}

fn d(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn raw_rmsd(a: &[Point], b: &[Point]) -> f64 {
    (a.iter().zip(b).map(|(p, q)| d(*p, *q).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn oracle_rmsd(a: &[Point], b: &[Point]) -> f64 {
    let (r, t) = horn(a, b);
    raw_rmsd(&moved(&r, t, a), b)
}

// ---------------------------------------------------------------------------
// TM-score, lDDT, diversity, AUROC written directly from their definitions.

pub fn oracle_d0(l: usize) -> f64 {
    let x = l as f64 - 15.0;
    let c = if x < 0.0 { -(-x).powf(1.0 / 3.0) } else { x.powf(1.0 / 3.0) };
    (1.24 * c - 1.8).max(0.5)
}

fn tm_of(p: &[Point], r: &[Point], d0: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let x = d(p[i], r[i]) / d0;
        s += 1.0 / (1.0 + x * x);
    }
    s / p.len() as f64
}

/// Best score over the raw pose and fits on every fragment of length L, L/2
/// and L/4 (at least 3 residues).
pub fn oracle_tm(pred: &[Point], reference: &[Point]) -> f64 {
    let l = pred.len();
    let d0 = oracle_d0(l);
    let mut best = tm_of(pred, reference, d0);
    let mut seen = Vec::new();
    for len in [l, l / 2, l / 4] {
        if len < 3 || seen.contains(&len) {
            continue;
        }
        seen.push(len);
        for start in 0..=l - len {
            let (r, t) = horn(&pred[start..start + len], &reference[start..start + len]);
            best = best.max(tm_of(&moved(&r, t, pred), reference, d0));
        }
    }
    best
}

/// Full-length single fit only.
pub fn oracle_tm_full_fit(pred: &[Point], reference: &[Point]) -> f64 {
    let (r, t) = horn(pred, reference);
    tm_of(&moved(&r, t, pred), reference, oracle_d0(pred.len()))
}

/// Mean over thresholds of the fraction of ordered inter-residue pairs whose
/// distance deviation is under the threshold.
pub fn oracle_lddt(pred: &[Point], reference: &[Point], residue_of: &[usize]) -> f64 {
    let mut per = [0usize; 4];
    let mut total = 0usize;
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if i == j || residue_of[i] == residue_of[j] || d(reference[i], reference[j]) >= 15.0 {
                continue;
            }
            total += 1;
            let dev = (d(pred[i], pred[j]) - d(reference[i], reference[j])).abs();
            for (k, th) in [0.5, 1.0, 2.0, 4.0].iter().enumerate() {
                if dev < *th {
                    per[k] += 1;
                }
            }
        }
    }
    per.iter().map(|c| *c as f64 / total as f64).sum::<f64>() / 4.0
}

fn kmer_vector(seq: &str) -> Vec<f64> {
    let alphabet = ['A', 'C', 'G', 'U'];
    let mut counts: HashMap<String, f64> = HashMap::new();
    let chars: Vec<char> = seq.chars().collect();
    for w in chars.windows(3) {
        *counts.entry(w.iter().collect()).or_default() += 1.0;
    }
    let mut v = Vec::with_capacity(64);
    for a in alphabet {
        for b in alphabet {
            for c in alphabet {
                let k: String = [a, b, c].iter().collect();
                v.push(counts.get(&k).copied().unwrap_or(0.0) / (chars.len() - 2) as f64);
            }
        }
    }
    v
}

fn corr(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let num = n * sxy - sx * sy;
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    (den > 0.0).then(|| num / den)
}

pub fn oracle_diversity(seqs: &[String]) -> f64 {
    let vs: Vec<Vec<f64>> = seqs.iter().map(|s| kmer_vector(s)).collect();
    let mut rs = Vec::new();
    for i in 0..vs.len() {
        for j in 0..vs.len() {
            if i < j {
                if let Some(r) = corr(&vs[i], &vs[j]) {
                    rs.push(r);
                }
            }
        }
    }
    1.0 - rs.iter().sum::<f64>() / rs.len() as f64
}

/// Fraction of positive–negative pairs ranked correctly, ties counting half.
pub fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------------------
// Random instances.

pub fn random_points<R: Rng>(n: usize, box_size: f64, rng: &mut R) -> Vec<Point> {
    (0..n).map(|_| [0, 1, 2].map(|_| box_size * (uniform(rng) - 0.5))).collect()
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> M3 {
    let q: Vec<f64> = (0..4).map(|_| normal(rng)).collect();
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (q0, q1, q2, q3) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2.0 * (q1 * q2 - q0 * q3), 2.0 * (q1 * q3 + q0 * q2)],
        [2.0 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2.0 * (q2 * q3 - q0 * q1)],
        [2.0 * (q1 * q3 - q0 * q2), 2.0 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3],
    ]
}

pub fn jitter<R: Rng>(pts: &[Point], sigma: f64, rng: &mut R) -> Vec<Point> {
    pts.iter().map(|p| [0, 1, 2].map(|k| p[k] + sigma * normal(rng))).collect()
}

pub fn random_bases<R: Rng>(n: usize, rng: &mut R) -> String {
    (0..n).map(|_| ['A', 'C', 'G', 'U'][rng.random_range(0..4)]).collect()
}

// ---------------------------------------------------------------------------
// Composite-block gradient checks.

fn core_err(e: ribosphere::Error) -> TensorError {
    TensorError::InvalidArgument { op: "forward", msg: e.to_string() }
}

pub const COMPOSITE_STEP: f64 = 1e-4;
pub const COMPOSITE_PROBES: usize = 6;

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        atom_set: AtomSet::A10,
        encoder: EncoderConfig { layers: 1, hidden_dim: 16, heads: 2, pair_dim: 4, dist_bins: 8, ..EncoderConfig::default() },
        fsq_levels: vec![8, 6, 5],
        decoder: DecoderConfig {
            layers: 1,
            hidden_dim: 16,
            heads: 2,
            pair_dim: 4,
            dist_bins: 8,
            time_freqs: 8,
            mlp_factor: 2,
            ..DecoderConfig::default()
        },
        coord_scale: 10.0,
    }
}

pub fn tiny_invfold_config() -> InvfoldConfig {
    InvfoldConfig {
        scalar_dim: 16,
        vector_channels: 4,
        blocks: 1,
        heads: 2,
        pair_dim: 4,
        dist_bins: 8,
        rbf_dim: 4,
        ..InvfoldConfig::default()
    }
}

pub fn encoder_gradcheck() -> GradCheckReport {
    let model = RiboModel::new(tiny_model_config(), 3).unwrap();
    let s = synth_helix(6, 32.7, 2.81, AtomSet::A10, &mut seeded(4)).unwrap();
    let cfg = model.config.clone();
    check(&model.params, COMPOSITE_STEP, COMPOSITE_PROBES, |tape, store| {
        let h = encoder::encode(tape, store, &cfg.encoder, cfg.coord_scale, &s, cfg.atom_set).map_err(core_err)?;
        Ok(project(tape, h, 5)?)
    })
    .unwrap()
}

pub fn vector_field_gradcheck() -> GradCheckReport {
    let model = RiboModel::new(tiny_model_config(), 6).unwrap();
    let cfg = model.config.clone();
    let (l, a) = (5, cfg.atom_set.len());
    let mut rng = seeded(7);
    let x = flow::sample_noise_zero_com(l * a, &mut rng);
    let codes: Vec<f64> = (0..l * 3).map(|_| uniform(&mut rng) * 2.0 - 1.0).collect();
    check(&model.params, COMPOSITE_STEP, COMPOSITE_PROBES, |tape, store| {
        let input = FieldInput { x_t: &x, t: 0.37, residues: l, atoms: a, anchor_slot: cfg.atom_set.c4_index(), coord_scale: cfg.coord_scale };
        let c = tape.constant(vec![l, 3], codes.clone())?;
        let v = decoder::velocity(tape, store, &cfg.decoder, &input, Some(c)).map_err(core_err)?;
        Ok(project(tape, v, 8)?)
    })
    .unwrap()
}

pub fn adapter_gradcheck() -> GradCheckReport {
    let s = synth_helix(6, 32.7, 2.81, AtomSet::A11, &mut seeded(9)).unwrap();
    let mut rng = seeded(10);
    let codes: Vec<f64> = (0..6 * 3).map(|_| uniform(&mut rng) * 2.0 - 1.0).collect();
    let ex = InvfoldExample::from_codes(&s, codes, 3).unwrap();
    let mut model = InvfoldModel::new(tiny_invfold_config(), 3, 11).unwrap();
    // Move every parameter off its initial value so zero-initialised gates
    // do not hide terms.
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        let t = model.params.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v += 0.3 * (uniform(&mut rng) - 0.5);
        }
    }
    let cfg = model.config.clone();
    check(&model.params, COMPOSITE_STEP, COMPOSITE_PROBES, |tape, store| {
        let out = adapter::adapter(tape, store, &cfg, &ex.adapter_input()).map_err(core_err)?;
        let a = project(tape, out.node_s, 12)?;
        let b = project(tape, out.node_v, 13)?;
        Ok(tape.add(a, b)?)
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// Test fields for the samplers.

/// `v = −x`, with the score also `−x`.
pub struct Linear(pub usize);

impl FlowField for Linear {
    fn num_points(&self) -> usize {
        self.0
    }
    fn velocity(&self, x: &[Point], _: f64, _: bool) -> Result<Vec<Point>> {
        Ok(x.iter().map(|p| p.map(|v| -v)).collect())
    }
    fn score(&self, x: &[Point], _: f64, _: &[Point]) -> Result<Vec<Point>> {
        Ok(x.iter().map(|p| p.map(|v| -v)).collect())
    }
}

/// Conditional and unconditional fields differ.
pub struct Split(pub usize);

impl FlowField for Split {
    fn num_points(&self) -> usize {
        self.0
    }
    fn velocity(&self, x: &[Point], t: f64, conditional: bool) -> Result<Vec<Point>> {
        let k = if conditional { 1.0 } else { -2.0 };
        Ok(x.iter().enumerate().map(|(i, p)| p.map(|v| k * (v.sin() + t * i as f64))).collect())
    }
}

/// Same as `Split` but the unconditional branch is unusable.
pub struct CondOnly(pub usize);

impl FlowField for CondOnly {
    fn num_points(&self) -> usize {
        self.0
    }
    fn velocity(&self, x: &[Point], t: f64, conditional: bool) -> Result<Vec<Point>> {
        assert!(conditional);
        Split(self.0).velocity(x, t, true)
    }
}

pub fn bits(x: &[Point]) -> Vec<u64> {
    x.iter().flat_map(|p| p.map(f64::to_bits)).collect()
}

pub fn euler_slope() -> f64 {
    let ns = [10usize, 20, 40, 80, 160];
    let mut pts = Vec::new();
    for n in ns {
        let cfg = SamplerConfig { steps: n, ..SamplerConfig::default() };
        let mut rng = seeded(3);
        let x0 = flow::sample_noise_zero_com(6, &mut seeded(3));
        let x1 = flow::euler_sample(&Linear(6), &cfg, &mut rng, &mut ()).unwrap();
        let exact: Vec<Point> = x0.iter().map(|p| p.map(|v| v * (-1.0f64).exp())).collect();
        let err = x1.iter().zip(&exact).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0, f64::max);
        pts.push(((n as f64).ln(), err.ln()));
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    -(m * sxy - sx * sy) / (m * sxx - sx * sx)
}

/// Largest deviation of the converted score from the conditional Gaussian
/// score `−x_0 / (1 − t)` over the checked times.
pub fn score_conversion_error() -> f64 {
    let mut rng = seeded(13);
    let x1 = flow::sample_noise_zero_com(8, &mut rng);
    let x0 = flow::sample_noise_zero_com(8, &mut rng);
    let v: Vec<Point> = x1.iter().zip(&x0).map(|(a, b)| [0, 1, 2].map(|k| a[k] - b[k])).collect();
    let mut worst = 0.0f64;
    for t in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let xt = flow::interpolate(&x1, &x0, t).unwrap();
        let s = flow::vf_to_score(&v, &xt, t).unwrap();
        for (si, x0i) in s.iter().zip(&x0) {
            for k in 0..3 {
                worst = worst.max((si[k] + x0i[k] / (1.0 - t)).abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Fixtures.

/// Four helices with distinct length, twist and rise, so every position is
/// distinguishable by geometry.
pub fn invfold_fixture() -> Vec<RnaStructure> {
    let mut rng = seeded(7);
    [(24, 28.0, 2.6), (30, 31.0, 2.8), (27, 34.0, 3.0), (33, 37.0, 3.2)]
        .iter()
        .enumerate()
        .map(|(k, (l, tw, rise))| {
            let mut s = synth_helix(*l, *tw, *rise, AtomSet::A11, &mut rng).unwrap();
            s.id = format!("toy{k}");
            s
        })
        .collect()
}

/// Two token sequences sharing `PLANTED` at different offsets; every other
/// 5-gram occurs once.
pub const PLANTED: [usize; 5] = [11, 42, 7, 99, 3];

pub fn planted_corpus() -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (100..112).collect();
    a.splice(3..3, PLANTED);
    let mut b: Vec<usize> = (200..215).collect();
    b.splice(8..8, PLANTED);
    vec![a, b]
}

// ---------------------------------------------------------------------------
// Pipeline smoke run.

pub fn smoke_config(seed: u64, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.synthetic = Some(SynthConfig { count: 4, min_len: 12, max_len: 16 });
    cfg.data.split = [1.0, 0.0, 0.0];
    cfg.model = tiny_model_config();
    cfg.train.max_steps = Some(steps);
    cfg.train.log_every = 10;
    cfg.train.checkpoint_every = Some(25);
    cfg.train.lr_schedule = LrSchedule::Cosine { warmup: 5 };
    cfg.sampler.steps = 10;
    cfg
}

/// ingest → train → tokenize → reconstruct → evaluate in `dir`.
pub fn smoke_run(dir: &Path, seed: u64, steps: usize) -> Context {
    let ctx = Context::new(smoke_config(seed, steps), dir).unwrap();
    pipeline::cmd_ingest(&ctx, &[]).unwrap();
    pipeline::cmd_train(&ctx, false).unwrap();
    pipeline::cmd_tokenize(&ctx, SplitSel::All).unwrap();
    pipeline::cmd_reconstruct(&ctx, SplitSel::All, false).unwrap();
    pipeline::cmd_evaluate(&ctx, SplitSel::All, None).unwrap();
    ctx
}

pub const SMOKE_OUTPUTS: [&str; 5] = ["model.ckpt", "checkpoint.ckpt", "tokens.tsv", "metrics.tsv", "reconstructed.pdb"];
