//! Fixed-step midpoint integration of learned fields, divergence of the
//! field, CNF log-likelihoods and sample generation on the manifold.
//!
//! Along a trajectory of dx/dt = u(x, t) the log-density obeys
//! d/dt log p_t(x(t)) = −div u(x(t), t). The likelihood pass carries
//! ℓ with dℓ/dt = div u, integrated backward from 1−t_ε to 0 from ℓ = 0,
//! so that log p₁(x₁) = log p₀(x(0)) + ℓ(0).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fm::{step_rng, NoiseSpec};
use crate::nn::{NnError, VectorFieldModel};
use crate::symspace::{geodesic, ManifoldPoint, PCoord, SpaceDescriptor, SpaceError};

/// Largest 𝔭 dimension for which [`DivergenceMode::default_for`] picks the exact trace.
pub const EXACT_DIVERGENCE_MAX_DIM: usize = 40;
pub const DEFAULT_HUTCHINSON_PROBES: usize = 32;

#[derive(Debug, Error)]
pub enum CnfError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid integrator config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DivergenceMode {
    Exact,
    /// Rademacher probes, redrawn at every evaluation.
    Hutchinson { probes: usize, seed: u64 },
}

impl DivergenceMode {
    pub fn default_for(p_dim: usize, seed: u64) -> Self {
        if p_dim <= EXACT_DIVERGENCE_MAX_DIM {
            Self::Exact
        } else {
            Self::Hutchinson {
                probes: DEFAULT_HUTCHINSON_PROBES,
                seed,
            }
        }
    }
}

impl std::fmt::Display for DivergenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Exact => f.write_str("exact"),
            Self::Hutchinson { probes, .. } => write!(f, "hutchinson({probes})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub divergence_mode: DivergenceMode,
}

impl IntegratorConfig {
    pub fn new(steps: usize, t_start: f64, t_end: f64) -> Self {
        Self {
            steps,
            t_start,
            t_end,
            divergence_mode: DivergenceMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<(), CnfError> {
        if self.steps == 0 {
            return Err(CnfError::InvalidConfig("steps must be at least 1".into()));
        }
        let in_unit = |t: f64| (0.0..=1.0).contains(&t);
        if !in_unit(self.t_start) || !in_unit(self.t_end) || self.t_start == self.t_end {
            return Err(CnfError::InvalidConfig(format!(
                "need distinct t_start, t_end in [0, 1], got {} and {}",
                self.t_start, self.t_end
            )));
        }
        if let DivergenceMode::Hutchinson { probes: 0, .. } = self.divergence_mode {
            return Err(CnfError::InvalidConfig("Hutchinson needs at least one probe".into()));
        }
        Ok(())
    }

    /// Signed step size; negative when integrating backward in time.
    pub fn step_size(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }
}

/// Explicit midpoint: x ← x + h·f(x + (h/2)·f(x, t), t + h/2).
pub fn integrate_midpoint<F>(field: F, x0: &[f64], cfg: &IntegratorConfig) -> Result<Vec<f64>, CnfError>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>, CnfError>,
{
    integrate_inner(field, x0, cfg, None)
}

/// Like [`integrate_midpoint`] but also returns every intermediate state,
/// starting with `x0`.
pub fn integrate_midpoint_path<F>(
    field: F,
    x0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>, CnfError>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>, CnfError>,
{
    let mut path = Vec::with_capacity(cfg.steps + 1);
    integrate_inner(field, x0, cfg, Some(&mut path))?;
    Ok(path)
}

fn integrate_inner<F>(
    mut field: F,
    x0: &[f64],
    cfg: &IntegratorConfig,
    mut path: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>, CnfError>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>, CnfError>,
{
    cfg.validate()?;
    let h = cfg.step_size();
    let mut x = x0.to_vec();
    if let Some(p) = path.as_deref_mut() {
        p.push(x.clone());
    }
    let mut mid = vec![0.0; x.len()];
    for step in 0..cfg.steps {
        let t = cfg.t_start + step as f64 * h;
        let k1 = field(&x, t)?;
        check_len(&k1, x.len())?;
        for ((m, xi), k) in mid.iter_mut().zip(&x).zip(&k1) {
            *m = xi + 0.5 * h * k;
        }
        let k2 = field(&mid, t + 0.5 * h)?;
        check_len(&k2, x.len())?;
        for (xi, k) in x.iter_mut().zip(&k2) {
            *xi += h * k;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CnfError::NonFiniteState { step });
        }
        if let Some(p) = path.as_deref_mut() {
            p.push(x.clone());
        }
    }
    Ok(x)
}

fn check_len(v: &[f64], expected: usize) -> Result<(), CnfError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(CnfError::DimMismatch {
            expected,
            found: v.len(),
        })
    }
}

/// A time-dependent vector field evaluated on row-major batches sharing one time.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, xs: &[f64], t: f64) -> Result<Vec<f64>, CnfError>;

    /// Velocity and per-row divergence at the same points.
    fn velocity_and_divergence(
        &self,
        xs: &[f64],
        t: f64,
        mode: DivergenceMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Vec<f64>), CnfError>;
}

impl VelocityField for VectorFieldModel {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn velocity(&self, xs: &[f64], t: f64) -> Result<Vec<f64>, CnfError> {
        let n = xs.len() / self.input_dim();
        Ok(self.forward_batch(xs, &vec![t; n])?)
    }

    fn velocity_and_divergence(
        &self,
        xs: &[f64],
        t: f64,
        mode: DivergenceMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Vec<f64>), CnfError> {
        let n = xs.len() / self.input_dim();
        let cache = self.forward_cached(xs, &vec![t; n])?;
        let div = batch_divergence(self, &cache, mode, rng);
        Ok((cache.into_output(), div))
    }
}

/// u(x, t) = A·x + b with `A` given row-major; its divergence is tr A in
/// every mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, a: Vec<f64>, b: Vec<f64>) -> Self {
        assert_eq!(a.len(), dim * dim, "A must be dim × dim");
        assert_eq!(b.len(), dim, "b must have dim entries");
        Self { dim, a, b }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, xs: &[f64], _t: f64) -> Result<Vec<f64>, CnfError> {
        let d = self.dim;
        let mut out = Vec::with_capacity(xs.len());
        for x in xs.chunks(d) {
            for i in 0..d {
                let row = &self.a[i * d..(i + 1) * d];
                out.push(row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.b[i]);
            }
        }
        Ok(out)
    }

    fn velocity_and_divergence(
        &self,
        xs: &[f64],
        t: f64,
        _mode: DivergenceMode,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Vec<f64>), CnfError> {
        Ok((self.velocity(xs, t)?, vec![self.trace(); xs.len() / self.dim]))
    }
}

fn rademacher(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn batch_divergence(
    model: &VectorFieldModel,
    cache: &crate::nn::ForwardCache,
    mode: DivergenceMode,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    match mode {
        DivergenceMode::Exact => model.divergence_exact_cached(cache),
        DivergenceMode::Hutchinson { probes, .. } => {
            let len = cache.batch() * model.input_dim();
            let eps: Vec<Vec<f64>> = (0..probes).map(|_| rademacher(rng, len)).collect();
            model.divergence_probes_cached(cache, &eps)
        }
    }
}

/// tr ∂u/∂x at a single point. Hutchinson draws its probes from `mode`'s seed.
pub fn divergence(model: &VectorFieldModel, x: &[f64], t: f64, mode: DivergenceMode) -> Result<f64, CnfError> {
    let cache = model.forward_cached(x, &[t])?;
    let seed = match mode {
        DivergenceMode::Hutchinson { seed, .. } => seed,
        DivergenceMode::Exact => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(batch_divergence(model, &cache, mode, &mut rng)[0])
}

/// log p₁ for each row of `xs`, by integrating the augmented state backward
/// from `t_end` to 0 with `steps` midpoint steps.
pub fn log_likelihood<F: VelocityField>(
    model: &F,
    xs: &[f64],
    noise: &NoiseSpec,
    steps: usize,
    t_end: f64,
    mode: DivergenceMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, CnfError> {
    let d = model.dim();
    if xs.len() % d != 0 || noise.dim != d {
        return Err(CnfError::DimMismatch {
            expected: d,
            found: if noise.dim != d { noise.dim } else { xs.len() % d },
        });
    }
    let cfg = IntegratorConfig {
        steps,
        t_start: t_end,
        t_end: 0.0,
        divergence_mode: mode,
    };
    cfg.validate()?;
    let h = cfg.step_size();
    let mut x = xs.to_vec();
    let mut ell = vec![0.0; xs.len() / d];
    let mut mid = vec![0.0; x.len()];
    for step in 0..steps {
        let t = t_end + step as f64 * h;
        let k1 = model.velocity(&x, t)?;
        for ((m, xi), k) in mid.iter_mut().zip(&x).zip(&k1) {
            *m = xi + 0.5 * h * k;
        }
        let (k2, div) = model.velocity_and_divergence(&mid, t + 0.5 * h, mode, rng)?;
        for (xi, k) in x.iter_mut().zip(&k2) {
            *xi += h * k;
        }
        for (l, dv) in ell.iter_mut().zip(&div) {
            *l += h * dv;
        }
        if !x.iter().chain(&ell).all(|v| v.is_finite()) {
            return Err(CnfError::NonFiniteState { step });
        }
    }
    Ok(x.chunks(d).zip(&ell).map(|(x0, l)| noise.log_density(x0) + l).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NllConfig {
    pub steps: usize,
    pub chunks: usize,
    pub t_epsilon: f64,
    /// `None` selects [`DivergenceMode::default_for`] the model dimension.
    pub divergence: Option<DivergenceMode>,
    pub seed: u64,
}

impl Default for NllConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            chunks: 10,
            t_epsilon: 1e-3,
            divergence: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub nll_mean: f64,
    pub nll_std_over_chunks: f64,
    pub chunk_nll: Vec<f64>,
    pub n_points: usize,
    pub steps: usize,
    pub divergence_mode: String,
    pub t_epsilon: f64,
    pub seed: u64,
}

/// Chunk boundaries splitting `n` rows into `chunks` nearly equal parts.
pub fn chunk_ranges(n: usize, chunks: usize) -> Vec<std::ops::Range<usize>> {
    let c = chunks.clamp(1, n.max(1));
    let (base, extra) = (n / c, n % c);
    let mut start = 0;
    (0..c)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Mean negative log-likelihood (nats per point), averaged over chunk means.
pub fn nll<F: VelocityField>(model: &F, testset: &[f64], noise: &NoiseSpec, cfg: &NllConfig) -> Result<NllReport, CnfError> {
    let d = model.dim();
    if testset.is_empty() || testset.len() % d != 0 {
        return Err(CnfError::DimMismatch {
            expected: d,
            found: testset.len() % d,
        });
    }
    if !(0.0..0.5).contains(&cfg.t_epsilon) {
        return Err(CnfError::InvalidConfig(format!("t_epsilon {} outside [0, 0.5)", cfg.t_epsilon)));
    }
    let mode = cfg.divergence.unwrap_or_else(|| DivergenceMode::default_for(d, cfg.seed));
    let n = testset.len() / d;
    let ranges = chunk_ranges(n, cfg.chunks);
    let chunk_nll = ranges
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = step_rng(cfg.seed, i as u64);
            let lp = log_likelihood(
                model,
                &testset[r.start * d..r.end * d],
                noise,
                cfg.steps,
                1.0 - cfg.t_epsilon,
                mode,
                &mut rng,
            )?;
            Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
        })
        .collect::<Result<Vec<f64>, CnfError>>()?;
    let k = chunk_nll.len() as f64;
    let mean = chunk_nll.iter().sum::<f64>() / k;
    let std = if chunk_nll.len() > 1 {
        (chunk_nll.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(NllReport {
        nll_mean: mean,
        nll_std_over_chunks: std,
        chunk_nll,
        n_points: n,
        steps: cfg.steps,
        divergence_mode: mode.to_string(),
        t_epsilon: cfg.t_epsilon,
        seed: cfg.seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSamples {
    /// `count × p_dim` endpoints in 𝔭 coordinates.
    pub coords: Vec<f64>,
    pub points: Vec<ManifoldPoint>,
}

/// Pushes `count` noise draws from 0 to 1−t_ε through the model and maps the
/// endpoints to the manifold with geodesic(·, 1).
pub fn generate_samples<F: VelocityField>(
    model: &F,
    noise: &NoiseSpec,
    count: usize,
    steps: usize,
    t_epsilon: f64,
    space: SpaceDescriptor,
) -> Result<GeneratedSamples, CnfError> {
    let d = space.p_dim();
    if model.dim() != d || noise.dim != d {
        return Err(CnfError::DimMismatch {
            expected: d,
            found: if model.dim() != d { model.dim() } else { noise.dim },
        });
    }
    if count == 0 {
        return Ok(GeneratedSamples {
            coords: Vec::new(),
            points: Vec::new(),
        });
    }
    let x0 = crate::fm::sample_noise(noise, count);
    let cfg = IntegratorConfig::new(steps, 0.0, 1.0 - t_epsilon);
    let coords = integrate_midpoint(|x: &[f64], t| model.velocity(x, t), &x0, &cfg)?;
    let points = coords
        .par_chunks(d)
        .map(|row| Ok(geodesic(&PCoord::new(space, row.to_vec())?, 1.0)))
        .collect::<Result<Vec<_>, SpaceError>>()?;
    Ok(GeneratedSamples { coords, points })
}
