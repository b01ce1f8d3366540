//! Pair potentials for the particle benchmarks and a random-walk Metropolis
//! sampler that draws from exp(−U).
//!
//! Pair sums run over unordered pairs i < j. The 1/(2τ) prefactor is kept,
//! so τ absorbs whichever pair-counting convention a reference uses.
//!
//! The double-well term is `a(d−d0) − b(d−d0)² + c(d−d0)⁴`. With the minus in
//! front of `b`, a double well needs b > 0; the default b = 4 gives the
//! usual −4(d−d0)² + 0.9(d−d0)⁴ landscape.
//!
//! For Lennard-Jones two forms are available. [`LjForm::Printed`] is
//! `(r_m/d)⁶ − 2(r_m/d)¹²`, which is unbounded below as d → 0 and makes a
//! sampler collapse the particles. [`LjForm::Standard`] is
//! `(r_m/d)¹² − 2(r_m/d)⁶`, the usual well with its minimum −ε at d = r_m,
//! and is the default.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Positions of `n_particles` points in ℝ^dim, particle-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleConfig {
    pub n_particles: usize,
    pub dim: usize,
    pub positions: Vec<f64>,
}

impl ParticleConfig {
    pub fn new(n_particles: usize, dim: usize, positions: Vec<f64>) -> Self {
        assert_eq!(positions.len(), n_particles * dim, "positions length");
        Self {
            n_particles,
            dim,
            positions,
        }
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LjForm {
    Printed,
    #[default]
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "potential", rename_all = "snake_case")]
pub enum PotentialParams {
    DoubleWell {
        a: f64,
        b: f64,
        c: f64,
        d0: f64,
        tau: f64,
    },
    LennardJones {
        eps: f64,
        r_m: f64,
        tau: f64,
        #[serde(default)]
        form: LjForm,
        /// Strength of the harmonic trap ½·Σ‖x_i − x̄‖² that keeps the
        /// cluster bound; 0 gives the bare pair potential.
        #[serde(default = "default_oscillator")]
        oscillator: f64,
    },
}

fn default_oscillator() -> f64 {
    1.0
}

impl PotentialParams {
    pub fn double_well_default() -> Self {
        Self::DoubleWell {
            a: 0.0,
            b: 4.0,
            c: 0.9,
            d0: 4.0,
            tau: 1.0,
        }
    }

    pub fn lennard_jones_default() -> Self {
        Self::LennardJones {
            eps: 1.0,
            r_m: 1.0,
            tau: 1.0,
            form: LjForm::Standard,
            oscillator: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Self::DoubleWell { tau, a, b, c, d0 } => {
                if !(tau > 0.0) {
                    return Err(format!("tau must be positive, got {tau}"));
                }
                if ![a, b, c, d0].iter().all(|v| v.is_finite()) {
                    return Err("double-well parameters must be finite".into());
                }
            }
            Self::LennardJones {
                eps,
                r_m,
                tau,
                oscillator,
                ..
            } => {
                if !(oscillator >= 0.0) || !oscillator.is_finite() {
                    return Err(format!("oscillator must be finite and non-negative, got {oscillator}"));
                }
                if !(tau > 0.0) {
                    return Err(format!("tau must be positive, got {tau}"));
                }
                if !(r_m > 0.0) {
                    return Err(format!("r_m must be positive, got {r_m}"));
                }
                if !eps.is_finite() {
                    return Err("eps must be finite".into());
                }
            }
        }
        Ok(())
    }

    pub fn energy(&self, cfg: &ParticleConfig) -> f64 {
        match self {
            Self::DoubleWell { .. } => dw_energy(cfg, self),
            Self::LennardJones { .. } => lj_energy(cfg, self),
        }
    }
}

fn pair_distance(x: &[f64], i: usize, j: usize, dim: usize) -> f64 {
    let a = &x[i * dim..(i + 1) * dim];
    let b = &x[j * dim..(j + 1) * dim];
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Double-well pair energy.
pub fn dw_energy(cfg: &ParticleConfig, params: &PotentialParams) -> f64 {
    let PotentialParams::DoubleWell { a, b, c, d0, tau } = *params else {
        panic!("dw_energy called with {params:?}");
    };
    let mut sum = 0.0;
    for i in 0..cfg.n_particles {
        for j in (i + 1)..cfg.n_particles {
            let d = pair_distance(&cfg.positions, i, j, cfg.dim) - d0;
            let d2 = d * d;
            sum += a * d - b * d2 + c * d2 * d2;
        }
    }
    sum / (2.0 * tau)
}

/// Lennard-Jones pair energy with distances clamped below at 1e-3·r_m,
/// plus the centre-of-mass trap.
pub fn lj_energy(cfg: &ParticleConfig, params: &PotentialParams) -> f64 {
    let PotentialParams::LennardJones {
        eps,
        r_m,
        tau,
        form,
        oscillator,
    } = *params
    else {
        panic!("lj_energy called with {params:?}");
    };
    let d_min = 1e-3 * r_m;
    let mut sum = 0.0;
    for i in 0..cfg.n_particles {
        for j in (i + 1)..cfg.n_particles {
            let d = pair_distance(&cfg.positions, i, j, cfg.dim).max(d_min);
            let s6 = (r_m / d).powi(6);
            let s12 = s6 * s6;
            sum += match form {
                LjForm::Printed => s6 - 2.0 * s12,
                LjForm::Standard => s12 - 2.0 * s6,
            };
        }
    }
    let mut trap = 0.0;
    if oscillator != 0.0 {
        let n = cfg.n_particles as f64;
        for k in 0..cfg.dim {
            let mean = (0..cfg.n_particles).map(|i| cfg.particle(i)[k]).sum::<f64>() / n;
            trap += (0..cfg.n_particles).map(|i| (cfg.particle(i)[k] - mean).powi(2)).sum::<f64>();
        }
    }
    (eps * sum / 2.0 + oscillator * 0.5 * trap) / tau
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub walkers: usize,
    pub burnin_steps: usize,
    pub samples_per_walker: usize,
    pub proposal_std: f64,
    pub seed: u64,
    pub thinning: usize,
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("walkers", self.walkers),
            ("samples_per_walker", self.samples_per_walker),
            ("thinning", self.thinning),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if !(self.proposal_std > 0.0) || !self.proposal_std.is_finite() {
            return Err(format!("proposal_std must be positive, got {}", self.proposal_std));
        }
        Ok(())
    }
}

/// How walkers are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    /// i.i.d. N(0, std²) coordinates.
    Gaussian { std: f64 },
    /// Cubic (or square) lattice with the given spacing, centered at the
    /// origin, plus N(0, jitter²) noise.
    Lattice { spacing: f64, jitter: f64 },
}

impl InitialState {
    pub fn draw<R: Rng + ?Sized>(&self, n_particles: usize, dim: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            Self::Gaussian { std } => (0..n_particles * dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Self::Lattice { spacing, jitter } => {
                let mut side = 1usize;
                while side.pow(dim as u32) < n_particles {
                    side += 1;
                }
                let offset = (side as f64 - 1.0) / 2.0;
                let mut out = Vec::with_capacity(n_particles * dim);
                for p in 0..n_particles {
                    let mut idx = p;
                    for _ in 0..dim {
                        let coord = (idx % side) as f64 - offset;
                        idx /= side;
                        out.push(spacing * coord + jitter * rng.sample::<f64, _>(StandardNormal));
                    }
                }
                out
            }
        }
    }
}

/// Output of [`metropolis_sample`], ordered walker-major.
#[derive(Clone, Debug, PartialEq)]
pub struct McmcRun {
    pub n_particles: usize,
    pub dim: usize,
    /// `walkers × samples_per_walker` rows of `n_particles × dim` values.
    pub samples: Vec<Vec<f64>>,
    pub acceptance_per_walker: Vec<f64>,
}

impl McmcRun {
    /// Fraction of accepted proposals over all walkers and all steps.
    pub fn acceptance_rate(&self) -> f64 {
        if self.acceptance_per_walker.is_empty() {
            return 0.0;
        }
        self.acceptance_per_walker.iter().sum::<f64>() / self.acceptance_per_walker.len() as f64
    }

    pub fn configs(&self) -> impl Iterator<Item = ParticleConfig> + '_ {
        self.samples
            .iter()
            .map(|s| ParticleConfig::new(self.n_particles, self.dim, s.clone()))
    }
}

/// Random-walk Metropolis with isotropic Gaussian proposals, one independent
/// chain per walker. Walker `w` uses the stream seeded by `seed ⊕ w`, so the
/// output does not depend on how walkers are scheduled across threads.
pub fn metropolis_sample<E>(
    energy: E,
    n_particles: usize,
    dim: usize,
    init: InitialState,
    cfg: &McmcConfig,
) -> McmcRun
where
    E: Fn(&[f64]) -> f64 + Sync,
{
    let chains: Vec<(Vec<Vec<f64>>, f64)> = (0..cfg.walkers)
        .into_par_iter()
        .map(|w| run_chain(&energy, n_particles, dim, init, cfg, cfg.seed ^ w as u64))
        .collect();
    let mut samples = Vec::with_capacity(cfg.walkers * cfg.samples_per_walker);
    let mut acceptance_per_walker = Vec::with_capacity(cfg.walkers);
    for (chain, rate) in chains {
        samples.extend(chain);
        acceptance_per_walker.push(rate);
    }
    McmcRun {
        n_particles,
        dim,
        samples,
        acceptance_per_walker,
    }
}

fn run_chain<E>(
    energy: &E,
    n_particles: usize,
    dim: usize,
    init: InitialState,
    cfg: &McmcConfig,
    seed: u64,
) -> (Vec<Vec<f64>>, f64)
where
    E: Fn(&[f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = init.draw(n_particles, dim, &mut rng);
    let mut u = energy(&x);
    let mut proposal = vec![0.0; x.len()];
    let mut accepted = 0usize;
    let mut steps = 0usize;

    let mut step = |x: &mut Vec<f64>, u: &mut f64, rng: &mut ChaCha8Rng| {
        for (p, xi) in proposal.iter_mut().zip(x.iter()) {
            *p = xi + cfg.proposal_std * rng.sample::<f64, _>(StandardNormal);
        }
        let u_new = energy(&proposal);
        let delta = u_new - *u;
        let accept = if delta <= 0.0 {
            true
        } else if delta.is_finite() {
            rng.gen::<f64>() < (-delta).exp()
        } else {
            false
        };
        steps += 1;
        if accept {
            accepted += 1;
            x.copy_from_slice(&proposal);
            *u = u_new;
        }
    };

    for _ in 0..cfg.burnin_steps {
        step(&mut x, &mut u, &mut rng);
    }
    let mut out = Vec::with_capacity(cfg.samples_per_walker);
    for _ in 0..cfg.samples_per_walker {
        for _ in 0..cfg.thinning {
            step(&mut x, &mut u, &mut rng);
        }
        out.push(x.clone());
    }
    let rate = if steps == 0 {
        0.0
    } else {
        accepted as f64 / steps as f64
    };
    (out, rate)
}
