mod common;

use common::*;
use ribosphere::flow::{self, NoiseSchedule, SamplerConfig};
use ribosphere::geometry::Point;
use ribosphere::model::RiboModel;
use ribosphere::synth::synth_helix;
use ribosphere::AtomSet;
use ribosphere_tensor::rng::{seeded, stream};

#[test]
fn euler_is_first_order() {
    let slope = euler_slope();
    assert!((0.8..=1.2).contains(&slope), "slope {slope}");
}

#[test]
fn single_step_is_one_velocity_call() {
    let cfg = SamplerConfig { steps: 1, ..SamplerConfig::default() };
    let x0 = flow::sample_noise_zero_com(5, &mut seeded(4));
    let x1 = flow::euler_sample(&Linear(5), &cfg, &mut seeded(4), &mut ()).unwrap();
    assert!(x1.iter().flatten().all(|v| *v == 0.0));
    assert!(x0.iter().flatten().any(|v| *v != 0.0));
}

#[test]
fn zero_guidance_is_the_conditional_field() {
    let mut rng = seeded(5);
    let vc: Vec<Point> = random_points(7, 4.0, &mut rng);
    let vu: Vec<Point> = random_points(7, 4.0, &mut rng);
    assert_eq!(bits(&flow::cfg_field(&vc, &vu, 0.0).unwrap()), bits(&vc));
    let cfg = SamplerConfig { steps: 12, guidance: 0.0, ..SamplerConfig::default() };
    let a = flow::euler_sample(&Split(7), &cfg, &mut seeded(6), &mut ()).unwrap();
    let b = flow::euler_sample(&CondOnly(7), &cfg, &mut seeded(6), &mut ()).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let guided = SamplerConfig { guidance: 1.5, ..cfg };
    let c = flow::euler_sample(&Split(7), &guided, &mut seeded(6), &mut ()).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn degenerate_sde_is_euler() {
    let cfg = SamplerConfig { steps: 15, guidance: 0.5, eta: 0.0, gamma: 0.0, ..SamplerConfig::default() };
    let a = flow::euler_sample(&Split(9), &cfg, &mut seeded(7), &mut ()).unwrap();
    let b = flow::sde_sample(&Split(9), &cfg, &mut seeded(7), &mut ()).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn noisy_sde_differs_between_seeds() {
    let cfg = SamplerConfig { steps: 20, eta: 0.5, gamma: 0.5, ..SamplerConfig::default() };
    let a = flow::sde_sample(&Split(9), &cfg, &mut seeded(8), &mut ()).unwrap();
    let b = flow::sde_sample(&Split(9), &cfg, &mut seeded(9), &mut ()).unwrap();
    assert!(raw_rmsd(&a, &b) > 0.0);
}

#[test]
fn ornstein_uhlenbeck_variance() {
    // dx = −(1 + η) x dt + √(2γ) dW with η = 1, γ = 2 has stationary
    // variance γ / (1 + η) = 1, shrunk by 1 − 1/n on the zero-CoM subspace.
    let n = 4;
    let cfg = SamplerConfig {
        steps: 100,
        eta: 1.0,
        gamma: 2.0,
        schedule: NoiseSchedule::Constant { value: 1.0 },
        terminal_deterministic_from: 1.0,
        ..SamplerConfig::default()
    };
    let trajectories = 10_000;
    let mut sum_sq = 0.0;
    for k in 0..trajectories {
        let x = flow::sde_sample(&Linear(n), &cfg, &mut stream(11, &[k]), &mut ()).unwrap();
        sum_sq += x.iter().flatten().map(|v| v * v).sum::<f64>();
    }
    let var = sum_sq / (trajectories as f64 * n as f64 * 3.0);
    let analytic = 2.0 / (1.0 + 1.0) * (1.0 - 1.0 / n as f64);
    assert!((var / analytic - 1.0).abs() < 0.05, "variance {var} vs {analytic}");
}

#[test]
fn noise_variance_shrinks_by_projection() {
    let n = 5;
    let draws = 20_000;
    let mut sum_sq = 0.0;
    for k in 0..draws {
        let x = flow::sample_noise_zero_com(n, &mut stream(12, &[k]));
        sum_sq += x.iter().flatten().map(|v| v * v).sum::<f64>();
    }
    let var = sum_sq / (draws as f64 * n as f64 * 3.0);
    assert!((var - (1.0 - 1.0 / n as f64)).abs() < 0.02, "{var}");
}

#[test]
fn exact_field_gives_conditional_score() {
    assert!(score_conversion_error() < 1e-9);
    // At t = 0 the score is that of the standard normal.
    let x = flow::sample_noise_zero_com(4, &mut seeded(17));
    let s = flow::vf_to_score(&random_points(4, 3.0, &mut seeded(18)), &x, 0.0).unwrap();
    assert_eq!(bits(&s), bits(&x.iter().map(|p| p.map(|v| -v)).collect::<Vec<_>>()));
    assert!(flow::vf_to_score(&[[0.0; 3]], &[[0.0; 3]], 1.0).is_err());
}

#[test]
fn network_trajectories_stay_centered() {
    let model = RiboModel::new(tiny_model_config(), 14).unwrap();
    let s = synth_helix(8, 32.7, 2.81, AtomSet::A10, &mut seeded(15)).unwrap();
    let tokens = model.tokenize(&s).unwrap();
    let cfg = SamplerConfig { steps: 10, guidance: 0.5, eta: 0.3, gamma: 0.2, ..SamplerConfig::default() };
    let mut worst = 0.0f64;
    for k in 0..10 {
        let mut obs = |_: usize, _: f64, x: &[Point]| {
            worst = worst.max(flow::center_of_mass(x).iter().fold(0.0, |m, c| m.max(c.abs())));
        };
        let out = model.decode(&tokens, &s, &cfg, k % 2 == 0, &mut stream(16, &[k]), &mut obs).unwrap();
        assert_eq!(out.coords.len(), s.coords.len());
    }
    assert!(worst < 1e-6, "{worst}");
}
