mod common;

use common::*;
use ribosphere::fsq::{self, FsqConfig};
use ribosphere::geometry::random_rotation_matrix;
use ribosphere::model::RiboModel;
use ribosphere::synth::synth_helix;
use ribosphere::AtomSet;
use ribosphere_tensor::gradcheck::relative_error;
use ribosphere_tensor::rng::{seeded, uniform};
use ribosphere_tensor::{ParamStore, Tape, Tensor};

fn global_model() -> RiboModel {
    let mut cfg = tiny_model_config();
    cfg.encoder.window = None;
    RiboModel::new(cfg, 21).unwrap()
}

#[test]
fn latents_are_not_rotation_invariant() {
    let model = global_model();
    let s = synth_helix(8, 32.7, 2.81, AtomSet::A10, &mut seeded(22)).unwrap();
    let r = random_rotation_matrix(&mut seeded(23));
    let a = model.encode(&s).unwrap().latents;
    let b = model.encode(&s.rotate(&r)).unwrap().latents;
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn swapping_two_residues_reaches_every_latent() {
    let model = global_model();
    let s = synth_helix(8, 32.7, 2.81, AtomSet::A10, &mut seeded(24)).unwrap();
    let a = s.atoms_per_residue();
    let (i, j) = (1, 5);
    let mut t = s.clone();
    t.sequence.swap(i, j);
    for k in 0..a {
        t.coords.swap(i * a + k, j * a + k);
    }
    let d = model.config.encoder.hidden_dim;
    let x = model.encode(&s).unwrap().latents;
    let y = model.encode(&t).unwrap().latents;
    for r in 0..s.len() {
        let moved = (0..d).any(|c| x[r * d + c] != y[r * d + c]);
        assert!(moved, "latent of residue {r} unchanged");
    }
}

#[test]
fn quantised_gradient_equals_bound_gradient() {
    let cfg = FsqConfig::preset_240();
    let mut rng = seeded(25);
    let z: Vec<f64> = (0..4 * 3).map(|_| 3.0 * (uniform(&mut rng) - 0.5)).collect();
    let w: Vec<f64> = (0..4 * 3).map(|_| uniform(&mut rng) - 0.5).collect();
    let mut store = ParamStore::new();
    store.insert("z", Tensor::new(vec![4, 3], z.clone()).unwrap().with_grad());
    let mut tape = Tape::new();
    let zv = tape.param(&store, "z").unwrap();
    let b = fsq::bound(&mut tape, zv, &cfg).unwrap();
    let q = fsq::quantize(&mut tape, b).unwrap();
    let wv = tape.constant(vec![4, 3], w.clone()).unwrap();
    let p = tape.mul(q, wv).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.param_grads().into_iter().find(|(n, _)| n == "z").unwrap().1;
    let h = 1e-5;
    for (i, gi) in g.iter().enumerate() {
        let l = cfg.levels()[i % 3];
        let num = (fsq::bound_value(z[i] + h, l) - fsq::bound_value(z[i] - h, l)) / (2.0 * h) * w[i];
        assert!(relative_error(*gi, num) < 1e-6, "entry {i}: {gi} vs {num}");
    }
}
