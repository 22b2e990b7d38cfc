//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs without the libtest harness so the lines are always
//! printed.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::*;
use ribosphere::analysis::{js_divergence, kl_divergence, mine_ngrams, motif_kl, ngram_consistency, NgramInstance};
use ribosphere::decoder::DecoderConfig;
use ribosphere::encoder::EncoderConfig;
use ribosphere::flow::{self, SamplerConfig};
use ribosphere::fsq::FsqConfig;
use ribosphere::geometry::Point;
use ribosphere::invfold::{tradeoff_sweep, InvfoldConfig, InvfoldExample, InvfoldModel, InvfoldTrainConfig, InvfoldTrainer, SWEEP_SAMPLES, SWEEP_TEMPERATURES};
use ribosphere::metrics::{self, tm_d0};
use ribosphere::model::{corpus_scale, ModelConfig, RiboModel};
use ribosphere::structure::parse_sequence;
use ribosphere::synth::{helix_corpus, synth_helix};
use ribosphere::train::{LrSchedule, TrainConfig, Trainer};
use ribosphere::AtomSet;
use ribosphere_tensor::opcheck::{op_suite, TOLERANCE};
use ribosphere_tensor::rng::{seeded, stream, uniform};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    let mut reports: Vec<(&str, _)> = op_suite().unwrap();
    reports.push(("encoder", encoder_gradcheck()));
    reports.push(("vector field", vector_field_gradcheck()));
    reports.push(("adapter", adapter_gradcheck()));
    let count = reports.len();
    for (name, r) in &reports {
        checked += r.checked;
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < TOLERANCE && secs < 120.0,
        format!("{count} checks, {checked} entries, max rel err {:.2e} ({}), {secs:.1} s", worst.0, worst.1),
    )
}

fn exhaustive_bijection(cfg: &FsqConfig) -> bool {
    let mut seen = HashSet::new();
    for index in 0..cfg.codebook_size() {
        let digits = cfg.index_to_digits(index).unwrap();
        if cfg.digits_to_index(&digits).unwrap() != index || !seen.insert(digits) {
            return false;
        }
    }
    seen.len() == cfg.codebook_size()
}

fn fsq_space() -> Outcome {
    let presets = [FsqConfig::preset_240(), FsqConfig::preset_1000(), FsqConfig::preset_4375()];
    let sizes: Vec<usize> = presets.iter().map(|c| c.codebook_size()).collect();
    let exhaustive = exhaustive_bijection(&presets[0]) && exhaustive_bijection(&presets[1]);
    // Sampled: random digit tuples must map to distinct indices exactly when
    // the tuples are distinct, and back.
    let cfg = &presets[2];
    let mut rng = seeded(21);
    let (mut tuples, mut indices) = (HashSet::new(), HashSet::new());
    let mut roundtrip = true;
    for _ in 0..100_000 {
        let digits: Vec<u32> = cfg.levels().iter().map(|&l| (uniform(&mut rng) * l as f64) as u32).collect();
        let index = cfg.digits_to_index(&digits).unwrap();
        roundtrip &= index < cfg.codebook_size() && cfg.index_to_digits(index).unwrap() == digits;
        tuples.insert(digits);
        indices.insert(index);
    }
    let sampled = roundtrip && tuples.len() == indices.len();
    outcome(
        sizes == [240, 1000, 4375] && exhaustive && sampled,
        format!("sizes {sizes:?}, exhaustive 240/1000 {exhaustive}, 1e5 draws over 4375: {} distinct tuples, {} distinct indices", tuples.len(), indices.len()),
    )
}

fn sampler_identities() -> Outcome {
    let mut rng = seeded(22);
    let vc = random_points(9, 4.0, &mut rng);
    let vu = random_points(9, 4.0, &mut rng);
    let field = bits(&flow::cfg_field(&vc, &vu, 0.0).unwrap()) == bits(&vc);
    let cfg = SamplerConfig { steps: 12, guidance: 0.0, ..SamplerConfig::default() };
    let a = flow::euler_sample(&Split(9), &cfg, &mut seeded(23), &mut ()).unwrap();
    let b = flow::euler_sample(&CondOnly(9), &cfg, &mut seeded(23), &mut ()).unwrap();
    let guided = bits(&a) == bits(&b);
    let cfg = SamplerConfig { steps: 15, guidance: 0.5, eta: 0.0, gamma: 0.0, ..SamplerConfig::default() };
    let e = flow::euler_sample(&Split(9), &cfg, &mut seeded(24), &mut ()).unwrap();
    let s = flow::sde_sample(&Split(9), &cfg, &mut seeded(24), &mut ()).unwrap();
    let sde = bits(&e) == bits(&s);
    let slope = euler_slope();
    outcome(
        field && guided && sde && (0.8..=1.2).contains(&slope),
        format!("g=0 field {field}, g=0 trajectory {guided}, sde(0,0)==euler {sde}, euler slope {slope:.4}"),
    )
}

fn score_conversion() -> Outcome {
    let err = score_conversion_error();
    outcome(
        err < 1e-9,
        format!("max |s + x0/(1-t)| = {err:.2e} over t in {{0, .25, .5, .75, .9}} (conditional score; equals -x0 at t = 0)"),
    )
}

fn zero_com() -> Outcome {
    let model = RiboModel::new(tiny_model_config(), 25).unwrap();
    let s = synth_helix(10, 32.7, 2.81, AtomSet::A10, &mut seeded(26)).unwrap();
    let tokens = model.tokenize(&s).unwrap();
    let cfg = SamplerConfig { steps: 20, guidance: 0.5, eta: 0.3, gamma: 0.2, ..SamplerConfig::default() };
    let mut worst = 0.0f64;
    let mut states = 0;
    for k in 0..100 {
        let mut obs = |_: usize, _: f64, x: &[Point]| {
            states += 1;
            worst = worst.max(flow::center_of_mass(x).iter().fold(0.0, |m, c| m.max(c.abs())));
        };
        model.decode(&tokens, &s, &cfg, k % 2 == 1, &mut stream(27, &[k]), &mut obs).unwrap();
    }
    outcome(worst < 1e-6, format!("100 trajectories, {states} states, max |CoM| {worst:.2e} Å"))
}

fn metric_oracles() -> Outcome {
    let mut rng = seeded(28);
    let (mut rmsd, mut tm, mut lddt, mut div, mut auc, mut kabsch) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..50 {
        let n = 3 + k % 8;
        let r = random_points(n, 10.0, &mut rng);
        let p = jitter(&moved(&random_rotation(&mut rng), [1.0, -2.0, 3.0], &r), 0.3 + 0.2 * (k % 4) as f64, &mut rng);
        rmsd = rmsd.max((metrics::rmsd(&p, &r, true).unwrap() - oracle_rmsd(&p, &r)).abs());
        tm = tm.max((metrics::tm_score_points(&p, &r).unwrap() - oracle_tm(&p, &r)).abs());
        let res: Vec<usize> = (0..n).map(|i| i / 2).collect();
        lddt = lddt.max((metrics::lddt_points(&p, &r, &res).unwrap() - oracle_lddt(&p, &r, &res)).abs());

        let strs: Vec<String> = (0..2 + k % 4).map(|_| random_bases(3 + k % 8, &mut rng)).collect();
        let seqs: Vec<_> = strs.iter().map(|s| parse_sequence(s).unwrap()).collect();
        div = div.max((metrics::diversity_3mer(&seqs).unwrap() - oracle_diversity(&strs)).abs());

        let m = 2 + k % 9;
        let mut labels: Vec<bool> = (0..m).map(|_| uniform(&mut rng) < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..m).map(|_| (uniform(&mut rng) * 4.0).floor() / 4.0).collect();
        auc = auc.max((metrics::auroc(&scores, &labels).unwrap() - oracle_auroc(&scores, &labels)).abs());

        let a = random_points(8, 20.0, &mut rng);
        let b = moved(&random_rotation(&mut rng), [uniform(&mut rng) * 50.0, -20.0, 7.5], &a);
        let al = metrics::kabsch_align(&a, &b).unwrap();
        kabsch = kabsch.max(raw_rmsd(&al.apply_all(&a), &b));
    }
    let d0 = tm_d0(42);
    outcome(
        rmsd < 1e-9 && tm < 1e-9 && lddt < 1e-9 && div < 1e-12 && auc < 1e-12 && kabsch < 1e-8 && d0 == 1.92,
        format!(
            "50 instances: rmsd {rmsd:.1e}, tm {tm:.1e}, lddt {lddt:.1e}, diversity {div:.1e}, auroc {auc:.1e}; kabsch planted {kabsch:.1e} Å; d0(42) = {d0}"
        ),
    )
}

fn toy_reconstruction() -> (Outcome, RiboModel) {
    let corpus = helix_corpus(32, 20, 40, AtomSet::A10, &mut seeded(1)).unwrap();
    let cfg = ModelConfig {
        atom_set: AtomSet::A10,
        encoder: EncoderConfig { layers: 2, hidden_dim: 64, ..EncoderConfig::default() },
        fsq_levels: vec![8, 6, 5],
        decoder: DecoderConfig { layers: 4, hidden_dim: 64, ..DecoderConfig::default() },
        coord_scale: corpus_scale(&corpus).unwrap(),
    };
    let train = TrainConfig { lr: 1e-3, lr_schedule: LrSchedule::Cosine { warmup: 100 }, max_steps: Some(2000), ..TrainConfig::default() };
    let start = Instant::now();
    let mut trainer = Trainer::new(RiboModel::new(cfg, 1).unwrap(), train, 1).unwrap();
    for _ in 0..2000 {
        trainer.train_step(&corpus).unwrap();
    }
    let train_secs = start.elapsed().as_secs_f64();
    let model = trainer.model;
    let sampler = SamplerConfig { steps: 100, ..SamplerConfig::default() };
    let (mut rmsd, mut tm) = (Vec::new(), Vec::new());
    for (i, s) in corpus.iter().enumerate() {
        let p = model.reconstruct(s, &sampler, &mut seeded(100 + i as u64)).unwrap();
        rmsd.push(metrics::rmsd_all_atom(&p, s).unwrap());
        tm.push(metrics::tm_score(&p, s).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    };
    let (r, t) = (median(&mut rmsd), median(&mut tm));
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let o = outcome(
        r < 2.0 && t > 0.6 && secs < 1800.0,
        format!("median rmsd {r:.3} Å, median tm {t:.3}; train {train_secs:.0} s, total {secs:.0} s on {cores} core(s)"),
    );
    (o, model)
}

fn toy_inverse_folding(tokenizer: &RiboModel) -> Outcome {
    let examples: Vec<InvfoldExample> = invfold_fixture().iter().map(|s| InvfoldExample::from_structure(tokenizer, s).unwrap()).collect();
    let model = InvfoldModel::new(InvfoldConfig::default(), tokenizer.fsq().dim(), 1).unwrap();
    let cfg = InvfoldTrainConfig { lr: 1e-3, steps: 2000, ..InvfoldTrainConfig::default() };
    let mut trainer = InvfoldTrainer::new(model, cfg, 1).unwrap();
    let recovery = |m: &InvfoldModel| {
        let r: Vec<f64> = examples.iter().map(|e| m.teacher_forced_recovery(e).unwrap()).collect();
        r.iter().sum::<f64>() / r.len() as f64
    };
    let mut reached = None;
    let mut last = 0.0;
    for step in 1..=2000 {
        trainer.train_step(&examples).unwrap();
        if step % 50 == 0 {
            last = recovery(&trainer.model);
            if last > 0.9 {
                reached = Some(step);
                break;
            }
        }
    }
    let rows = tradeoff_sweep(&trainer.model, &examples, &SWEEP_TEMPERATURES, SWEEP_SAMPLES, 3).unwrap();
    let (first, end) = (&rows[0], &rows[rows.len() - 1]);
    let direction = end.recovery_mean <= first.recovery_mean && end.diversity >= first.diversity;
    let monotone = rows.windows(2).all(|w| w[1].recovery_mean <= w[0].recovery_mean && w[1].diversity >= w[0].diversity);
    let sweep: Vec<String> = rows.iter().map(|r| format!("T={} rec {:.3} div {:.3}", r.temperature, r.recovery_mean, r.diversity)).collect();
    outcome(
        reached.is_some() && direction,
        format!(
            "recovery {last:.3} at step {}; sweep [{}]; every step monotone {monotone}",
            reached.map_or("none".into(), |s| s.to_string()),
            sweep.join(", ")
        ),
    )
}

fn codebook_analysis() -> Outcome {
    let ranked = mine_ngrams(&planted_corpus(), 5).unwrap();
    let planted = ranked[0].ngram == PLANTED && ranked[0].count == 2;
    let s = synth_helix(5, 32.7, 2.81, AtomSet::A10, &mut seeded(29)).unwrap();
    let mut rng = seeded(30);
    let copies: Vec<NgramInstance> = (0..4)
        .map(|k| {
            let r = ribosphere::geometry::random_rotation_matrix(&mut rng);
            let window = s.rotate(&r).translate([uniform(&mut rng) * 30.0, 4.0, -9.0]);
            NgramInstance { structure_id: format!("c{k}"), start: 0, n: 5, tokens: vec![0; 5], window }
        })
        .collect();
    let consistency = ngram_consistency(&copies).unwrap().mean_rmsd;
    let hand_kl = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    let kl = (kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap() - hand_kl)
        .abs()
        .max((motif_kl(&[0; 8], &[0, 0, 0, 0, 1, 1, 1, 1], 2).unwrap() - hand_kl).abs());
    let js = (js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs();
    outcome(
        planted && consistency.abs() < 1e-8 && kl < 1e-12 && js < 1e-12,
        format!("planted 5-gram first {planted}; rigid-copy consistency {consistency:.1e}; kl err {kl:.1e}; js err {js:.1e}"),
    )
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let ca = smoke_run(a.path(), 31, 200);
    let secs = start.elapsed().as_secs_f64();
    let cb = smoke_run(b.path(), 31, 200);
    let differing: Vec<&str> = SMOKE_OUTPUTS
        .iter()
        .copied()
        .filter(|name| std::fs::read(ca.path(name)).unwrap() != std::fs::read(cb.path(name)).unwrap())
        .collect();
    outcome(
        differing.is_empty() && secs < 600.0,
        format!("{} outputs compared, differing {differing:?}; one smoke run {secs:.0} s", SMOKE_OUTPUTS.len()),
    )
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let mut all = true;
    all &= report(1, "gradient suite", &gradients());
    all &= report(2, "fsq code space", &fsq_space());
    all &= report(3, "sampler identities", &sampler_identities());
    all &= report(4, "score conversion", &score_conversion());
    all &= report(5, "zero centre of mass", &zero_com());
    all &= report(6, "metric oracles", &metric_oracles());
    let (recon, tokenizer) = toy_reconstruction();
    all &= report(7, "toy reconstruction", &recon);
    all &= report(8, "toy inverse folding", &toy_inverse_folding(&tokenizer));
    all &= report(9, "codebook analysis", &codebook_analysis());
    all &= report(10, "determinism", &determinism());
    if !all {
        std::process::exit(1);
    }
}
