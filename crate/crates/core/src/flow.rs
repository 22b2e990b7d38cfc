//! Flow-matching primitives on the zero centre-of-mass subspace: noise,
//! interpolation, guidance, score conversion and the Euler / Euler–Maruyama
//! samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::rng::normal;

use crate::error::{Error, Result};
use crate::geometry::{self, Point};

/// Times this close to 1 are treated as terminal by [`vf_to_score`].
pub const TERMINAL_GUARD: f64 = 1e-6;

pub fn center_of_mass(x: &[Point]) -> Point {
    geometry::centroid(x)
}

/// Subtracts the per-axis mean in place.
pub fn project_zero_com(x: &mut [Point]) {
    let c = center_of_mass(x);
    for p in x.iter_mut() {
        *p = geometry::sub(*p, c);
    }
}

/// Standard normal coordinates projected onto the zero-CoM subspace.
pub fn sample_noise_zero_com<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point> {
    let mut x: Vec<Point> = (0..n).map(|_| [normal(rng), normal(rng), normal(rng)]).collect();
    project_zero_com(&mut x);
    x
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(a, b));
    }
    Ok(())
}

/// `t · x1 + (1 − t) · x0`.
pub fn interpolate(x1: &[Point], x0: &[Point], t: f64) -> Result<Vec<Point>> {
    same_len(x1.len(), x0.len())?;
    Ok(x1
        .iter()
        .zip(x0)
        .map(|(a, b)| std::array::from_fn(|k| t * a[k] + (1.0 - t) * b[k]))
        .collect())
}

/// `v_c + g · (v_c − v_u)`; `g = 0` returns `v_c` unchanged.
pub fn cfg_field(v_cond: &[Point], v_uncond: &[Point], g: f64) -> Result<Vec<Point>> {
    same_len(v_cond.len(), v_uncond.len())?;
    if g == 0.0 {
        return Ok(v_cond.to_vec());
    }
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(c, u)| std::array::from_fn(|k| c[k] + g * (c[k] - u[k])))
        .collect())
}

/// Score of the noised marginal from the velocity: `(t·v − x_t) / (1 − t)`.
pub fn vf_to_score(v: &[Point], x_t: &[Point], t: f64) -> Result<Vec<Point>> {
    same_len(v.len(), x_t.len())?;
    if t >= 1.0 - TERMINAL_GUARD {
        return Err(Error::TerminalTime(t));
    }
    let inv = 1.0 / (1.0 - t);
    Ok(v
        .iter()
        .zip(x_t)
        .map(|(a, x)| std::array::from_fn(|k| (t * a[k] - x[k]) * inv))
        .collect())
}

/// A velocity field the samplers can integrate.
pub trait FlowField {
    /// Number of points in a sample.
    fn num_points(&self) -> usize;

    /// Velocity at `(x, t)`; `conditional = false` uses the null conditioning.
    fn velocity(&self, x: &[Point], t: f64, conditional: bool) -> Result<Vec<Point>>;

    /// Score at `(x, t)` given the (guided) velocity there.
    fn score(&self, x: &[Point], t: f64, v: &[Point]) -> Result<Vec<Point>> {
        vf_to_score(v, x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    Constant { value: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::Constant { value: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn at(&self, _t: f64) -> f64 {
        match self {
            NoiseSchedule::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub eta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    pub terminal_deterministic_from: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            guidance: 0.0,
            eta: 0.0,
            gamma: 0.0,
            schedule: NoiseSchedule::default(),
            terminal_deterministic_from: 0.9,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config(format!("guidance must be >= 0, got {}", self.guidance)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("noise scale gamma must be >= 0, got {}", self.gamma)));
        }
        if !self.eta.is_finite() {
            return Err(Error::Config("score scale eta must be finite".into()));
        }
        Ok(())
    }
}

/// Receives `(step, t, x)` after every integration step.
pub trait Observer {
    fn observe(&mut self, step: usize, t: f64, x: &[Point]);
}

impl Observer for () {
    fn observe(&mut self, _: usize, _: f64, _: &[Point]) {}
}

impl<F: FnMut(usize, f64, &[Point])> Observer for F {
    fn observe(&mut self, step: usize, t: f64, x: &[Point]) {
        self(step, t, x)
    }
}

fn guided_velocity<F: FlowField + ?Sized>(field: &F, x: &[Point], t: f64, g: f64) -> Result<Vec<Point>> {
    let vc = field.velocity(x, t, true)?;
    if g == 0.0 {
        return Ok(vc);
    }
    let vu = field.velocity(x, t, false)?;
    cfg_field(&vc, &vu, g)
}

fn integrate<F: FlowField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    cfg: &SamplerConfig,
    stochastic: bool,
    rng: &mut R,
    obs: &mut dyn Observer,
) -> Result<Vec<Point>> {
    cfg.validate()?;
    let n = field.num_points();
    let mut x = sample_noise_zero_com(n, rng);
    let dt = 1.0 / cfg.steps as f64;
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let mut drift = guided_velocity(field, &x, t, cfg.guidance)?;
        let live = stochastic && t < cfg.terminal_deterministic_from;
        let g = cfg.schedule.at(t);
        if live && cfg.eta * g != 0.0 {
            let s = field.score(&x, t, &drift)?;
            for (d, sv) in drift.iter_mut().zip(&s) {
                *d = std::array::from_fn(|a| d[a] + g * cfg.eta * sv[a]);
            }
        }
        for (p, d) in x.iter_mut().zip(&drift) {
            *p = std::array::from_fn(|a| p[a] + d[a] * dt);
        }
        if live && cfg.gamma * g > 0.0 {
            let amp = (2.0 * g * cfg.gamma * dt).sqrt();
            let dw = sample_noise_zero_com(n, rng);
            for (p, w) in x.iter_mut().zip(&dw) {
                *p = std::array::from_fn(|a| p[a] + amp * w[a]);
            }
        }
        project_zero_com(&mut x);
        obs.observe(k + 1, t + dt, &x);
    }
    Ok(x)
}

/// Deterministic Euler integration from zero-CoM noise at t = 0 to t = 1.
pub fn euler_sample<F: FlowField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    cfg: &SamplerConfig,
    rng: &mut R,
    obs: &mut dyn Observer,
) -> Result<Vec<Point>> {
    integrate(field, cfg, false, rng, obs)
}

/// Euler–Maruyama integration of `dx = v dt + g η s dt + √(2 g γ) dW`, with the
/// stochastic terms switched off from `terminal_deterministic_from` onwards.
pub fn sde_sample<F: FlowField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    cfg: &SamplerConfig,
    rng: &mut R,
    obs: &mut dyn Observer,
) -> Result<Vec<Point>> {
    integrate(field, cfg, true, rng, obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ribosphere_tensor::rng::seeded;

    struct Constant(usize, Point);

    impl FlowField for Constant {
        fn num_points(&self) -> usize {
            self.0
        }
        fn velocity(&self, x: &[Point], _: f64, _: bool) -> Result<Vec<Point>> {
            Ok(vec![self.1; x.len()])
        }
    }

    #[test]
    fn noise_is_centered() {
        let x = sample_noise_zero_com(17, &mut seeded(1));
        assert!(center_of_mass(&x).iter().all(|c| c.abs() < 1e-12));
        assert_eq!(sample_noise_zero_com(1, &mut seeded(1)), vec![[0.0; 3]]);
    }

    #[test]
    fn interpolation_endpoints() {
        let x1 = vec![[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]];
        let x0 = vec![[0.0, 2.0, 0.0], [0.0, -2.0, 0.0]];
        assert_eq!(interpolate(&x1, &x0, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x1, &x0, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x1, &x0, 0.5).unwrap(), vec![[1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]]);
        assert!(interpolate(&x1, &x0[..1], 0.5).is_err());
    }

    #[test]
    fn guidance_arithmetic() {
        assert_eq!(cfg_field(&[[2.0; 3]], &[[1.0; 3]], 1.0).unwrap(), vec![[3.0; 3]]);
        let vc = vec![[-0.0, 1.5, f64::MIN_POSITIVE]];
        assert_eq!(cfg_field(&vc, &[[9.0; 3]], 0.0).unwrap()[0].map(f64::to_bits), vc[0].map(f64::to_bits));
        assert_eq!(cfg_field(&vc, &vc, 3.7).unwrap(), vc);
    }

    #[test]
    fn score_at_zero_and_terminal() {
        let x = vec![[1.0, -2.0, 0.5]];
        assert_eq!(vf_to_score(&[[7.0; 3]], &x, 0.0).unwrap(), vec![[-1.0, 2.0, -0.5]]);
        assert!(matches!(vf_to_score(&[[0.0; 3]], &x, 1.0), Err(Error::TerminalTime(_))));
        assert!(vf_to_score(&[[0.0; 3]], &x, 0.9999999).is_err());
    }

    #[test]
    fn constant_field_telescopes() {
        let c = [0.0; 3];
        for n in [1, 3, 8] {
            let f = Constant(5, c);
            let cfg = SamplerConfig { steps: n, ..SamplerConfig::default() };
            let x = euler_sample(&f, &cfg, &mut seeded(4), &mut ()).unwrap();
            let x0 = sample_noise_zero_com(5, &mut seeded(4));
            for (a, b) in x.iter().zip(&x0) {
                assert!(geometry::dist(*a, *b) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = SamplerConfig { steps: 0, ..SamplerConfig::default() };
        assert!(euler_sample(&Constant(2, [0.0; 3]), &cfg, &mut seeded(0), &mut ()).is_err());
    }
}
