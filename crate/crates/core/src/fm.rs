//! Conditional flow matching on 𝔭 with the straight-line path
//! x_t = (1−t)·x0 + t·x1 and target x1 − x0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdamW, NnError, VectorFieldModel};

#[derive(Debug, Error)]
pub enum FmError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Isotropic Gaussian N(μ·1, σ²I) on ℝ^dim; μ is 0 unless a shifted base
/// is asked for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mean: f64,
}

fn default_sigma() -> f64 {
    1.0
}

impl NoiseSpec {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            sigma: 1.0,
            seed,
            mean: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FmError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(FmError::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.mean.is_finite() {
            return Err(FmError::InvalidConfig("noise mean must be finite".into()));
        }
        if self.dim == 0 {
            return Err(FmError::InvalidConfig("noise dim must be positive".into()));
        }
        Ok(())
    }

    /// log N(x; μ·1, σ²I).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        let sq: f64 = x.iter().map(|v| (v - self.mean) * (v - self.mean)).sum();
        -0.5 * sq / s2 - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln()
    }

    pub fn draw(&self, count: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..count * self.dim)
            .map(|_| self.mean + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `count × dim` row-major draws, reproducible from `spec.seed`.
pub fn sample_noise(spec: &NoiseSpec, count: usize) -> Vec<f64> {
    spec.draw(count, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// Returns (x_t, target) with target = x1 − x0.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x0.len(), x1.len(), "interpolate: length mismatch");
    let xt = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let target = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    (xt, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub t_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            steps: 50_000,
            eval_every: 100,
            lr: 1e-4,
            weight_decay: 1e-5,
            seed: 0,
            t_epsilon: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FmError> {
        if self.batch_size == 0 {
            return Err(FmError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(FmError::InvalidConfig("eval_every must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.t_epsilon) {
            return Err(FmError::InvalidConfig(format!(
                "t_epsilon must lie in [0, 0.5), got {}",
                self.t_epsilon
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(FmError::InvalidConfig("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// One training minibatch: rows of x0 and x1 and one time per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmBatch {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: Vec<f64>,
}

impl CfmBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn interpolated(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut xt = Vec::with_capacity(self.x0.len());
        let mut target = Vec::with_capacity(self.x0.len());
        for ((a, b), &t) in self.x0.chunks(d).zip(self.x1.chunks(d)).zip(&self.t) {
            let (x, v) = interpolate(a, b, t);
            xt.extend(x);
            target.extend(v);
        }
        (xt, target)
    }
}

/// Batch mean of ‖u(x_t, t) − (x1 − x0)‖².
pub fn cfm_loss(model: &VectorFieldModel, batch: &CfmBatch) -> Result<f64, FmError> {
    Ok(cfm_loss_and_grad(model, batch, false)?.0)
}

/// Loss and, if requested, its parameter gradient.
pub fn cfm_loss_and_grad(
    model: &VectorFieldModel,
    batch: &CfmBatch,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), FmError> {
    let d = model.input_dim();
    let n = batch.len();
    if batch.x0.len() != n * d || batch.x1.len() != n * d {
        return Err(FmError::DimMismatch {
            expected: n * d,
            found: batch.x0.len().min(batch.x1.len()),
        });
    }
    if n == 0 {
        return Ok((0.0, with_grad.then(|| vec![0.0; model.param_count()])));
    }
    let (xt, target) = batch.interpolated(d);
    let cache = model.forward_cached(&xt, &batch.t)?;
    let resid: Vec<f64> = cache.output().iter().zip(&target).map(|(u, v)| u - v).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let grad = with_grad.then(|| {
        let scale = 2.0 / n as f64;
        let dout: Vec<f64> = resid.iter().map(|r| scale * r).collect();
        model.backward(&cache, &dout)
    });
    Ok((loss, grad))
}

/// Per-step generator: stream `step` of the ChaCha key derived from `seed`,
/// so any step can be replayed without replaying its predecessors.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Keeps training noise independent of minibatch selection when both
/// seeds coincide.
const NOISE_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Draws the minibatch used at `step`.
pub fn draw_batch(
    dataset: &[f64],
    d: usize,
    noise: &NoiseSpec,
    cfg: &TrainConfig,
    step: u64,
) -> CfmBatch {
    let rows = dataset.len() / d;
    let mut rng = step_rng(cfg.seed, step);
    let mut x1 = Vec::with_capacity(cfg.batch_size * d);
    for _ in 0..cfg.batch_size {
        let r = rng.gen_range(0..rows);
        x1.extend_from_slice(&dataset[r * d..(r + 1) * d]);
    }
    let t = (0..cfg.batch_size)
        .map(|_| rng.gen::<f64>() * (1.0 - cfg.t_epsilon))
        .collect();
    let x0 = noise.draw(cfg.batch_size, &mut step_rng(noise.seed ^ NOISE_STREAM_SALT, step));
    CfmBatch { x0, x1, t }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// (step, loss) pairs recorded every `eval_every` steps and at the last step.
    pub loss_history: Vec<(u64, f64)>,
    pub steps_run: u64,
}

/// Runs AdamW on the CFM loss from `optimizer.step_count()` up to
/// `cfg.steps`. On a non-finite loss the model is left as it was before
/// the failing step.
pub fn train(
    model: &mut VectorFieldModel,
    optimizer: &mut AdamW,
    dataset: &[f64],
    noise: &NoiseSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, FmError> {
    cfg.validate()?;
    noise.validate()?;
    let d = model.input_dim();
    if noise.dim != d {
        return Err(FmError::DimMismatch {
            expected: d,
            found: noise.dim,
        });
    }
    if dataset.is_empty() {
        return Err(FmError::EmptyDataset);
    }
    if dataset.len() % d != 0 {
        return Err(FmError::DimMismatch {
            expected: d,
            found: dataset.len() % d,
        });
    }

    let mut outcome = TrainOutcome::default();
    let start = optimizer.step_count();
    for step in start..cfg.steps {
        let batch = draw_batch(dataset, d, noise, cfg, step);
        let (loss, grad) = cfm_loss_and_grad(model, &batch, true)?;
        if !loss.is_finite() {
            return Err(FmError::NonFiniteLoss { step, loss });
        }
        optimizer.step(model.params_mut(), &grad.expect("gradient requested"));
        outcome.steps_run += 1;
        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            log::info!("step {step} loss {loss:.6}");
            outcome.loss_history.push((step, loss));
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, AdamWConfig, Architecture, ModelSpec};

    fn zero_model(d: usize) -> VectorFieldModel {
        VectorFieldModel::new(
            ModelSpec {
                architecture: Architecture::Mlp { depth: 1, width: 8 },
                input_dim: d,
                activation: Activation::Tanh,
                zero_output: true,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn noise_moments() {
        let spec = NoiseSpec::new(3, 5);
        let n = 100_000;
        let xs = sample_noise(&spec, n);
        for c in 0..3 {
            let col: Vec<f64> = xs.iter().skip(c).step_by(3).copied().collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
        assert!(sample_noise(&spec, 0).is_empty());
        assert_eq!(sample_noise(&spec, 10), sample_noise(&spec, 10));
    }

    #[test]
    fn interpolation_identities() {
        let (xt, v) = interpolate(&[1.0, 2.0], &[3.0, -1.0], 0.0);
        assert_eq!(xt, vec![1.0, 2.0]);
        assert_eq!(v, vec![2.0, -3.0]);
        let (xt, v) = interpolate(&[0.5, 0.5], &[0.5, 0.5], 0.7);
        assert_eq!(xt, vec![0.5, 0.5]);
        assert_eq!(v, vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let x1: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = rng.gen_range(0.0..0.999);
            let (xt, v) = interpolate(&x0, &x1, t);
            for i in 0..4 {
                assert!(((x1[i] - xt[i]) / (1.0 - t) - v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_loss_is_squared_displacement() {
        let m = zero_model(2);
        let same = CfmBatch {
            x0: vec![1.0, 2.0],
            x1: vec![1.0, 2.0],
            t: vec![0.3],
        };
        assert_eq!(cfm_loss(&m, &same).unwrap(), 0.0);
        let pair = CfmBatch {
            x0: vec![1.0, 2.0],
            x1: vec![4.0, -2.0],
            t: vec![0.6],
        };
        assert_eq!(cfm_loss(&m, &pair).unwrap(), 25.0);
    }

    #[test]
    fn plug_in_oracle_has_zero_loss() {
        // Output bias set to the common displacement, all weights zero.
        let mut m = zero_model(2);
        let n = m.param_count();
        m.params_mut()[n - 2..].copy_from_slice(&[1.5, -0.25]);
        let batch = CfmBatch {
            x0: vec![0.0, 0.0, 1.0, 1.0],
            x1: vec![1.5, -0.25, 2.5, 0.75],
            t: vec![0.1, 0.8],
        };
        assert!(cfm_loss(&m, &batch).unwrap() < 1e-12);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let mut m = zero_model(2);
        let before = m.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), m.param_count());
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train(&mut m, &mut opt, &[1.0, 2.0], &NoiseSpec::new(2, 0), &cfg).unwrap();
        assert_eq!(out.steps_run, 0);
        assert_eq!(m, before);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut m = zero_model(2);
        let mut opt = AdamW::new(AdamWConfig::default(), m.param_count());
        let cfg = TrainConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut m, &mut opt, &[], &NoiseSpec::new(2, 0), &cfg),
            Err(FmError::EmptyDataset)
        ));
        assert!(matches!(
            train(&mut m, &mut opt, &[1.0, 2.0], &NoiseSpec::new(3, 0), &cfg),
            Err(FmError::DimMismatch { .. })
        ));
        let bad = TrainConfig {
            t_epsilon: 0.6,
            ..cfg
        };
        assert!(train(&mut m, &mut opt, &[1.0, 2.0], &NoiseSpec::new(2, 0), &bad).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = zero_model(1);
        let mut opt = AdamW::new(AdamWConfig::default(), m.param_count());
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let err = train(&mut m, &mut opt, &[f64::NAN], &NoiseSpec::new(1, 0), &cfg).unwrap_err();
        assert!(matches!(err, FmError::NonFiniteLoss { step: 0, .. }));
    }

    #[test]
    fn batches_replay_per_step() {
        let data: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let noise = NoiseSpec::new(2, 3);
        let cfg = TrainConfig {
            batch_size: 6,
            ..Default::default()
        };
        assert_eq!(draw_batch(&data, 2, &noise, &cfg, 7), draw_batch(&data, 2, &noise, &cfg, 7));
        assert_ne!(draw_batch(&data, 2, &noise, &cfg, 7), draw_batch(&data, 2, &noise, &cfg, 8));
        let b = draw_batch(&data, 2, &noise, &cfg, 0);
        assert!(b.t.iter().all(|t| (0.0..1.0 - cfg.t_epsilon).contains(t)));
    }
}
