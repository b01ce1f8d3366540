//! The end-to-end stages behind the command-line tool: dataset generation,
//! preprocessing to 𝔭-coordinates, training, likelihood evaluation,
//! sampling and CSV export. Each stage reads and writes files in an output
//! directory and extends the run manifest of its inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnf::{generate_samples, nll, CnfError, NllConfig, NllReport};
use crate::energy::{metropolis_sample, InitialState, McmcConfig, ParticleConfig, PotentialParams};
use crate::fm::{train, FmError, NoiseSpec, TrainConfig};
use crate::io::{read_dataset, sidecar_path, write_dataset, Dataset, IoError, RunManifest, StageRecord};
use crate::linalg::DenseMatrix;
use crate::nn::{
    read_checkpoint, write_checkpoint, Activation, AdamW, AdamWConfig, Architecture, Checkpoint, CheckpointHeader,
    ModelSpec, NnError, VectorFieldModel,
};
use crate::symspace::{
    checkerboard_cell_is_dark, default_checkerboard_scale, inverse_stereographic, preprocess_point_with_diagnostics,
    sample_checkerboard, sphere_log_at_basepoint, stereographic_project, wrap_checkerboard, ManifoldPoint, PCoord,
    SpaceDescriptor, SpaceError,
};

/// Exit code for usage and configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for failures while running a stage.
pub const EXIT_RUNTIME: i32 = 3;

/// Largest fraction of rows preprocessing may drop before failing.
pub const MAX_DROP_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Fm(#[from] FmError),
    #[error(transparent)]
    Cnf(#[from] CnfError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Fm(FmError::InvalidConfig(_)) | Self::Cnf(CnfError::InvalidConfig(_)) => {
                EXIT_CONFIG
            }
            _ => EXIT_RUNTIME,
        }
    }
}

/// Deserializes a stage config, turning serde's messages (which name the
/// missing or malformed key) into [`PipelineError::Config`].
pub fn parse_config<T: serde::de::DeserializeOwned>(value: serde_json::Value) -> Result<T, PipelineError> {
    serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
}

/// What a stage produced, for the caller to print.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        IoError::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Appends a stage to `manifest` and writes it next to every output.
fn record_stage(
    mut manifest: RunManifest,
    stage: &str,
    config: serde_json::Value,
    summary: serde_json::Value,
    outputs: &[PathBuf],
) -> Result<(), PipelineError> {
    manifest.push(StageRecord {
        stage: stage.into(),
        config,
        summary,
        outputs: outputs.iter().map(|p| file_name(p)).collect(),
        finished_unix: now_unix(),
    });
    for out in outputs {
        manifest.write(&sidecar_path(out))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    Dw4,
    Lj13,
    Lj55,
    Checkerboard,
}

impl PotentialKind {
    /// (particles, spatial dimension) for the particle systems.
    pub fn particles(self) -> Option<(usize, usize)> {
        match self {
            Self::Dw4 => Some((4, 2)),
            Self::Lj13 => Some((13, 3)),
            Self::Lj55 => Some((55, 3)),
            Self::Checkerboard => None,
        }
    }

    /// The space the preprocessed data lives on.
    pub fn space(self) -> SpaceDescriptor {
        match self {
            Self::Checkerboard => SpaceDescriptor::Sphere { n: 2 },
            other => {
                let (n, k) = other.particles().expect("particle system");
                SpaceDescriptor::Grassmann { k, n }
            }
        }
    }

    fn default_params(self) -> Option<PotentialParams> {
        match self {
            Self::Dw4 => Some(PotentialParams::double_well_default()),
            Self::Lj13 | Self::Lj55 => Some(PotentialParams::lennard_jones_default()),
            Self::Checkerboard => None,
        }
    }

    fn default_proposal_std(self) -> f64 {
        match self {
            Self::Dw4 => 0.3,
            Self::Lj13 => 0.07,
            Self::Lj55 => 0.015,
            Self::Checkerboard => 1.0,
        }
    }

    fn default_init(params: &PotentialParams) -> InitialState {
        match *params {
            PotentialParams::DoubleWell { d0, .. } => InitialState::Gaussian { std: d0 },
            PotentialParams::LennardJones { r_m, .. } => InitialState::Lattice {
                spacing: r_m,
                jitter: 0.1 * r_m,
            },
        }
    }
}

/// `gen-data` configuration. Unset optional fields take per-potential
/// defaults; the manifest records the resolved values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub potential: PotentialKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: Option<PotentialParams>,
    #[serde(default)]
    pub walkers: Option<usize>,
    #[serde(default)]
    pub burnin: Option<usize>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub proposal_std: Option<f64>,
    #[serde(default)]
    pub thinning: Option<usize>,
    #[serde(default)]
    pub init: Option<InitialState>,
    /// Number of planar points for the checkerboard; `samples` is accepted
    /// as an alias.
    #[serde(default)]
    pub count: Option<usize>,
}

impl GenDataConfig {
    pub fn resolve(&self) -> Self {
        let mut r = self.clone();
        if self.potential == PotentialKind::Checkerboard {
            r.count.get_or_insert(self.samples.unwrap_or(20_000));
            r.samples = None;
            return r;
        }
        let params = *r.params.get_or_insert_with(|| self.potential.default_params().expect("particle system"));
        r.walkers.get_or_insert(100);
        r.burnin.get_or_insert(2_000);
        r.samples.get_or_insert(100);
        r.proposal_std.get_or_insert(self.potential.default_proposal_std());
        r.thinning.get_or_insert(10);
        r.init.get_or_insert(PotentialKind::default_init(&params));
        r
    }

    fn validate_params(&self) -> Result<(), PipelineError> {
        if let Some(p) = &self.params {
            p.validate().map_err(PipelineError::Config)?;
            let ok = matches!(
                (self.potential, p),
                (PotentialKind::Dw4, PotentialParams::DoubleWell { .. })
                    | (PotentialKind::Lj13 | PotentialKind::Lj55, PotentialParams::LennardJones { .. })
            );
            if !ok {
                return Err(PipelineError::Config(format!(
                    "params {p:?} do not match potential {:?}",
                    self.potential
                )));
            }
        }
        Ok(())
    }
}

pub const RAW_FILE: &str = "raw.cflw";

pub fn gen_data(cfg: &GenDataConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let cfg = cfg.resolve();
    ensure_dir(out)?;
    let path = out.join(RAW_FILE);
    let (ds, summary, text) = if cfg.potential == PotentialKind::Checkerboard {
        let count = cfg.count.expect("resolved");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pts = sample_checkerboard(count, &mut rng);
        let data = pts.iter().flat_map(|p| p.iter().copied()).collect();
        (
            Dataset::new(count, 2, data),
            serde_json::json!({"rows": count}),
            format!("checkerboard: {count} planar points"),
        )
    } else {
        cfg.validate_params()?;
        let (n, dim) = cfg.potential.particles().expect("particle system");
        let params = cfg.params.expect("resolved");
        let mcmc = McmcConfig {
            walkers: cfg.walkers.expect("resolved"),
            burnin_steps: cfg.burnin.expect("resolved"),
            samples_per_walker: cfg.samples.expect("resolved"),
            proposal_std: cfg.proposal_std.expect("resolved"),
            seed: cfg.seed,
            thinning: cfg.thinning.expect("resolved"),
        };
        mcmc.validate().map_err(PipelineError::Config)?;
        let energy = |x: &[f64]| params.energy(&ParticleConfig::new(n, dim, x.to_vec()));
        let run = metropolis_sample(energy, n, dim, cfg.init.expect("resolved"), &mcmc);
        let rows = run.samples.len();
        let data: Vec<f64> = run.samples.concat();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Runtime("sampler produced non-finite positions".into()));
        }
        let rate = run.acceptance_rate();
        (
            Dataset::new(rows, n * dim, data),
            serde_json::json!({
                "rows": rows,
                "acceptance_rate": rate,
                "acceptance_per_walker_min": run.acceptance_per_walker.iter().copied().fold(f64::INFINITY, f64::min),
                "acceptance_per_walker_max": run.acceptance_per_walker.iter().copied().fold(0.0, f64::max),
                "pair_convention": "unordered pairs i < j, prefactor 1/(2 tau)",
            }),
            format!("{:?}: {rows} configurations, acceptance rate {rate:.3}", cfg.potential),
        )
    };
    write_dataset(&path, &ds)?;
    let manifest = RunManifest {
        space: Some(cfg.potential.space()),
        ..Default::default()
    };
    let mut config = to_json(&cfg);
    config["out"] = to_json(&absolute(out));
    record_stage(manifest, "gen-data", config, summary, &[path.clone()])?;
    Ok(StageReport {
        outputs: vec![path],
        summary: text,
    })
}

// -------------------------------------------------------------- preprocess

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub input: PathBuf,
    /// Defaults to the space recorded in the input's manifest.
    #[serde(default)]
    pub space: Option<SpaceDescriptor>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Planar-to-𝔭 scale for checkerboard data; defaults to π/(2·max radius).
    #[serde(default)]
    pub checkerboard_scale: Option<f64>,
}

fn default_test_fraction() -> f64 {
    0.1
}

pub const TRAIN_FILE: &str = "train.cflw";
pub const TEST_FILE: &str = "test.cflw";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub rows_in: usize,
    pub dropped: usize,
    pub sign_flips: usize,
    pub span_discrepancy_mean: f64,
    pub span_discrepancy_max: f64,
}

/// Maps raw rows to 𝔭-coordinates of `space`, returning the kept rows
/// (in order) and statistics.
pub fn preprocess_rows(
    raw: &Dataset,
    space: SpaceDescriptor,
    planar_scale: Option<f64>,
) -> Result<(Dataset, PreprocessStats), PipelineError> {
    let p_dim = space.p_dim();
    let mut stats = PreprocessStats {
        rows_in: raw.rows,
        ..Default::default()
    };
    let results: Vec<Option<(Vec<f64>, bool, f64)>> = match space {
        SpaceDescriptor::Grassmann { k, n } => {
            if raw.cols != n * k {
                return Err(PipelineError::Config(format!(
                    "raw rows have {} columns, {space} needs {n}×{k} = {}",
                    raw.cols,
                    n * k
                )));
            }
            (0..raw.rows)
                .into_par_iter()
                .map(|i| {
                    let x = DenseMatrix::new(n, k, raw.row(i).to_vec()).ok()?;
                    let o = preprocess_point_with_diagnostics(&x, space).ok()?;
                    Some((o.coords.into_coords(), o.sign_flipped, o.span_discrepancy))
                })
                .collect()
        }
        SpaceDescriptor::Sphere { n } => {
            if raw.cols == n + 1 {
                (0..raw.rows)
                    .into_par_iter()
                    .map(|i| {
                        let v = raw.row(i);
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if !(norm > 0.0) || !norm.is_finite() {
                            return None;
                        }
                        let pt = ManifoldPoint::Sphere(v.iter().map(|x| x / norm).collect());
                        sphere_log_at_basepoint(&pt).ok().map(|c| (c.into_coords(), false, 0.0))
                    })
                    .collect()
            } else if raw.cols == 2 && n == 2 {
                let planar: Vec<[f64; 2]> = raw.data.chunks(2).map(|c| [c[0], c[1]]).collect();
                let scale = planar_scale.unwrap_or_else(|| default_checkerboard_scale(&planar));
                wrap_checkerboard(&planar, scale)
                    .into_iter()
                    .map(|c| {
                        let c = c.into_coords();
                        c.iter().all(|v| v.is_finite()).then_some((c, false, 0.0))
                    })
                    .collect()
            } else {
                return Err(PipelineError::Config(format!(
                    "raw rows have {} columns; {space} takes {} (points) or 2 (planar, n = 2)",
                    raw.cols,
                    n + 1
                )));
            }
        }
    };
    let mut data = Vec::with_capacity(raw.rows * p_dim);
    let mut kept = 0;
    let mut span_sum = 0.0;
    for r in results {
        match r {
            Some((coords, flipped, span)) => {
                data.extend(coords);
                kept += 1;
                stats.sign_flips += usize::from(flipped);
                span_sum += span;
                stats.span_discrepancy_max = stats.span_discrepancy_max.max(span);
            }
            None => stats.dropped += 1,
        }
    }
    if kept > 0 {
        stats.span_discrepancy_mean = span_sum / kept as f64;
    }
    Ok((Dataset::new(kept, p_dim, data), stats))
}

pub fn preprocess(cfg: &PreprocessConfig, out: &Path) -> Result<StageReport, PipelineError> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(PipelineError::Config(format!(
            "test_fraction must lie in [0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let raw = read_dataset(&cfg.input)?;
    let manifest = RunManifest::for_artifact(&cfg.input)?;
    let space = cfg
        .space
        .or(manifest.space)
        .ok_or_else(|| PipelineError::Config("missing key `space` (input has no manifest naming one)".into()))?;
    space.validate()?;

    let planar = matches!(space, SpaceDescriptor::Sphere { n: 2 }) && raw.cols == 2;
    let scale = if planar {
        let pts: Vec<[f64; 2]> = raw.data.chunks(2).map(|c| [c[0], c[1]]).collect();
        Some(cfg.checkerboard_scale.unwrap_or_else(|| default_checkerboard_scale(&pts)))
    } else {
        None
    };
    let (coords, stats) = preprocess_rows(&raw, space, scale)?;
    if stats.rows_in > 0 && stats.dropped as f64 > MAX_DROP_FRACTION * stats.rows_in as f64 {
        return Err(PipelineError::Runtime(format!(
            "dropped {} of {} rows (limit {:.0}%)",
            stats.dropped,
            stats.rows_in,
            100.0 * MAX_DROP_FRACTION
        )));
    }

    let mut order: Vec<usize> = (0..coords.rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = (cfg.test_fraction * coords.rows as f64).round() as usize;
    let gather = |idx: &[usize]| {
        let mut d = Vec::with_capacity(idx.len() * coords.cols);
        for &i in idx {
            d.extend_from_slice(coords.row(i));
        }
        Dataset::new(idx.len(), coords.cols, d)
    };
    let test = gather(&order[..n_test]);
    let train_set = gather(&order[n_test..]);

    ensure_dir(out)?;
    let train_path = out.join(TRAIN_FILE);
    let test_path = out.join(TEST_FILE);
    write_dataset(&train_path, &train_set)?;
    write_dataset(&test_path, &test)?;

    let resolved = PreprocessConfig {
        input: absolute(&cfg.input),
        space: Some(space),
        checkerboard_scale: scale,
        ..cfg.clone()
    };
    let mut config = to_json(&resolved);
    config["out"] = to_json(&absolute(out));
    let mut summary = to_json(&stats);
    summary["train_rows"] = train_set.rows.into();
    summary["test_rows"] = test.rows.into();
    let manifest = RunManifest {
        space: Some(space),
        ..manifest
    };
    let outputs = vec![train_path, test_path];
    record_stage(manifest, "preprocess", config, summary, &outputs)?;
    Ok(StageReport {
        outputs,
        summary: format!(
            "{space}: {} rows → {} train / {} test, {} columns; dropped {}, sign flips {}",
            stats.rows_in,
            train_set.rows,
            test.rows,
            coords.cols,
            stats.dropped,
            stats.sign_flips
        ),
    })
}

// ------------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub t_epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            steps: d.steps,
            eval_every: d.eval_every,
            lr: d.lr,
            weight_decay: d.weight_decay,
            t_epsilon: d.t_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub space: Option<SpaceDescriptor>,
    /// Defaults to the MLP for spheres and the ConcatSquash net for Grassmannians.
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub zero_output: bool,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub train: TrainSection,
    /// Continue from this checkpoint (model and optimizer state).
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

fn default_sigma() -> f64 {
    1.0
}

pub fn default_architecture(space: SpaceDescriptor) -> Architecture {
    match space {
        SpaceDescriptor::Sphere { .. } => Architecture::mlp_default(),
        SpaceDescriptor::Grassmann { .. } => Architecture::concat_squash_default(),
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

/// Metadata stored in the checkpoint header's `extra` field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub space: SpaceDescriptor,
    pub noise: NoiseSpec,
    pub t_epsilon: f64,
}

pub fn train_cmd(cfg: &TrainCmdConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let data = read_dataset(&cfg.dataset)?;
    let manifest = RunManifest::for_artifact(&cfg.dataset)?;
    let space = cfg
        .space
        .or(manifest.space)
        .ok_or_else(|| PipelineError::Config("missing key `space` (dataset has no manifest naming one)".into()))?;
    space.validate()?;
    let d = space.p_dim();
    if data.cols != d {
        return Err(PipelineError::Config(format!(
            "dataset has {} columns but {space} has p_dim {d}",
            data.cols
        )));
    }
    if data.rows == 0 {
        return Err(PipelineError::Config("dataset is empty".into()));
    }
    let architecture = cfg.architecture.unwrap_or_else(|| default_architecture(space));
    architecture.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let t = cfg.train;
    let train_cfg = TrainConfig {
        batch_size: t.batch_size,
        steps: t.steps,
        eval_every: t.eval_every,
        lr: t.lr,
        weight_decay: t.weight_decay,
        seed: cfg.seed,
        t_epsilon: t.t_epsilon,
    };
    train_cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let noise = NoiseSpec {
        sigma: cfg.noise_sigma,
        ..NoiseSpec::new(d, cfg.seed)
    };
    noise.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let spec = ModelSpec {
        architecture,
        input_dim: d,
        activation: cfg.activation,
        zero_output: cfg.zero_output,
    };
    let opt_cfg = AdamWConfig {
        lr: t.lr,
        weight_decay: t.weight_decay,
        ..Default::default()
    };

    let (mut model, mut opt) = match &cfg.resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if ck.header.model != spec {
                return Err(PipelineError::Config(format!(
                    "resume checkpoint has model {:?}, config asks for {spec:?}",
                    ck.header.model
                )));
            }
            let opt = ck
                .optimizer
                .map(|mut o| {
                    o.config = opt_cfg;
                    o
                })
                .ok_or_else(|| PipelineError::Config("resume checkpoint has no optimizer state".into()))?;
            (ck.model, opt)
        }
        None => {
            let model = VectorFieldModel::new(spec, cfg.seed)?;
            let opt = AdamW::new(opt_cfg, model.param_count());
            (model, opt)
        }
    };

    ensure_dir(out)?;
    let meta = ModelMeta {
        space,
        noise,
        t_epsilon: t.t_epsilon,
    };
    let make_ck = |model: &VectorFieldModel, opt: &AdamW| Checkpoint {
        header: CheckpointHeader {
            model: spec,
            seed: cfg.seed,
            step: opt.step_count(),
            param_count: model.param_count(),
            has_optimizer: true,
            optimizer: opt_cfg,
            extra: to_json(&meta),
        },
        model: model.clone(),
        optimizer: Some(opt.clone()),
    };

    let start = opt.step_count();
    let outcome = match train(&mut model, &mut opt, &data.data, &noise, &train_cfg) {
        Ok(o) => o,
        Err(FmError::NonFiniteLoss { step, loss }) => {
            let diag = out.join("model.diverged.ckpt");
            write_checkpoint(&diag, &make_ck(&model, &opt))?;
            return Err(PipelineError::Runtime(format!(
                "non-finite loss {loss} at step {step}; state before the step saved to {}",
                diag.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let ck_path = out.join(CHECKPOINT_FILE);
    write_checkpoint(&ck_path, &make_ck(&model, &opt))?;
    let loss_path = out.join(LOSS_FILE);
    let mut csv = String::from("step,loss\n");
    for (s, l) in &outcome.loss_history {
        writeln!(csv, "{s},{l:e}").expect("write to string");
    }
    write_text(&loss_path, &csv)?;

    let resolved = TrainCmdConfig {
        dataset: absolute(&cfg.dataset),
        space: Some(space),
        architecture: Some(architecture),
        resume: cfg.resume.as_deref().map(absolute),
        ..cfg.clone()
    };
    let mut config = to_json(&resolved);
    config["out"] = to_json(&absolute(out));
    let first = outcome.loss_history.first().map(|p| p.1);
    let last = outcome.loss_history.last().map(|p| p.1);
    let summary = serde_json::json!({
        "start_step": start,
        "steps_run": outcome.steps_run,
        "param_count": model.param_count(),
        "first_loss": first,
        "final_loss": last,
        "noise": noise,
    });
    let manifest = RunManifest {
        space: Some(space),
        ..manifest
    };
    let outputs = vec![ck_path, loss_path];
    record_stage(manifest, "train", config, summary, &outputs[..1])?;
    Ok(StageReport {
        outputs,
        summary: format!(
            "trained {} steps ({} parameters); loss {} → {}",
            outcome.steps_run,
            model.param_count(),
            first.map_or("-".into(), |v| format!("{v:.4}")),
            last.map_or("-".into(), |v| format!("{v:.4}")),
        ),
    })
}

/// Loads a checkpoint written by [`train_cmd`] with its metadata.
pub fn load_model(path: &Path) -> Result<(Checkpoint, ModelMeta), PipelineError> {
    let ck = read_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(ck.header.extra.clone())
        .map_err(|e| PipelineError::Config(format!("checkpoint metadata: {e}")))?;
    Ok((ck, meta))
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmdConfig {
    pub checkpoint: PathBuf,
    pub testset: PathBuf,
    #[serde(default)]
    pub nll: NllConfig,
    /// Evaluate only the first `max_points` rows.
    #[serde(default)]
    pub max_points: Option<usize>,
}

pub const REPORT_FILE: &str = "nll.json";

pub fn eval_cmd(cfg: &EvalCmdConfig, out: &Path) -> Result<(StageReport, NllReport), PipelineError> {
    let (ck, meta) = load_model(&cfg.checkpoint)?;
    let test = read_dataset(&cfg.testset)?;
    let d = ck.model.input_dim();
    if test.cols != d {
        return Err(PipelineError::Config(format!(
            "testset has {} columns, model expects {d}",
            test.cols
        )));
    }
    let rows = cfg.max_points.map_or(test.rows, |m| m.min(test.rows));
    if rows == 0 {
        return Err(PipelineError::Config("testset is empty".into()));
    }
    let report = nll(&ck.model, &test.data[..rows * d], &meta.noise, &cfg.nll)?;

    ensure_dir(out)?;
    let path = out.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&path, &json)?;
    let mut config = to_json(&EvalCmdConfig {
        checkpoint: absolute(&cfg.checkpoint),
        testset: absolute(&cfg.testset),
        ..cfg.clone()
    });
    config["out"] = to_json(&absolute(out));
    let manifest = RunManifest::for_artifact(&cfg.checkpoint)?;
    record_stage(manifest, "eval", config, to_json(&report), &[path.clone()])?;
    Ok((
        StageReport {
            outputs: vec![path],
            summary: format!(
                "NLL {:.4} ± {:.4} nats over {} points ({} steps, {} divergence, t_epsilon {})",
                report.nll_mean,
                report.nll_std_over_chunks,
                report.n_points,
                report.steps,
                report.divergence_mode,
                report.t_epsilon
            ),
        },
        report,
    ))
}

// ------------------------------------------------------------------ sample

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCmdConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "default_sample_count")]
    pub count: usize,
    #[serde(default = "default_sample_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub svg: Option<PathBuf>,
    /// Half-width of the square SVG viewport in the projected plane.
    #[serde(default = "default_svg_extent")]
    pub svg_extent: f64,
}

fn default_sample_count() -> usize {
    1000
}

fn default_sample_steps() -> usize {
    100
}

fn default_svg_extent() -> f64 {
    1.25
}

pub const SAMPLE_COORDS_FILE: &str = "samples.cflw";
pub const SAMPLE_POINTS_FILE: &str = "points.cflw";

/// Flattens a manifold point: sphere vectors as is, Grassmann frames row-major.
fn flatten_point(p: &ManifoldPoint) -> Vec<f64> {
    match p {
        ManifoldPoint::Sphere(v) => v.clone(),
        ManifoldPoint::Grassmann(f) => f.as_slice().to_vec(),
    }
}

fn point_width(space: SpaceDescriptor) -> usize {
    match space {
        SpaceDescriptor::Sphere { n } => n + 1,
        SpaceDescriptor::Grassmann { k, n } => n * k,
    }
}

pub fn sample_cmd(cfg: &SampleCmdConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let (ck, meta) = load_model(&cfg.checkpoint)?;
    if cfg.svg.is_some() && meta.space != (SpaceDescriptor::Sphere { n: 2 }) {
        return Err(PipelineError::Config(format!(
            "--svg needs Sphere(2) samples, checkpoint is for {}",
            meta.space
        )));
    }
    if !(cfg.svg_extent > 0.0) {
        return Err(PipelineError::Config("svg_extent must be positive".into()));
    }
    let noise = NoiseSpec {
        seed: cfg.seed,
        ..meta.noise
    };
    let samples = generate_samples(&ck.model, &noise, cfg.count, cfg.steps, meta.t_epsilon, meta.space)?;

    ensure_dir(out)?;
    let d = meta.space.p_dim();
    let coords_path = out.join(SAMPLE_COORDS_FILE);
    let points_path = out.join(SAMPLE_POINTS_FILE);
    write_dataset(&coords_path, &Dataset::new(cfg.count, d, samples.coords.clone()))?;
    let flat: Vec<f64> = samples.points.iter().flat_map(flatten_point).collect();
    write_dataset(&points_path, &Dataset::new(cfg.count, point_width(meta.space), flat))?;
    let mut outputs = vec![coords_path, points_path];
    let mut summary = serde_json::json!({"count": cfg.count});
    let mut text = format!("{} samples on {}", cfg.count, meta.space);
    if let Some(svg) = &cfg.svg {
        let (doc, skipped) = stereographic_svg(&samples.points, cfg.svg_extent);
        write_text(svg, &doc)?;
        summary["svg_skipped_at_pole"] = skipped.into();
        write!(text, "; SVG written, {skipped} points at the pole skipped").expect("write to string");
        outputs.push(svg.clone());
    }
    let mut config = to_json(&SampleCmdConfig {
        checkpoint: absolute(&cfg.checkpoint),
        svg: cfg.svg.as_deref().map(absolute),
        ..cfg.clone()
    });
    config["out"] = to_json(&absolute(out));
    let manifest = RunManifest::for_artifact(&cfg.checkpoint)?;
    record_stage(manifest, "sample", config, summary, &outputs[..2])?;
    Ok(StageReport { outputs, summary: text })
}

/// Scatter plot of stereographically projected S² points as plain SVG
/// circles on the square [−extent, extent]². Returns the document and the
/// number of points skipped at the projection pole.
pub fn stereographic_svg(points: &[ManifoldPoint], extent: f64) -> (String, usize) {
    const SIZE: f64 = 600.0;
    let mut skipped = 0;
    let mut doc = String::new();
    writeln!(
        doc,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .expect("write to string");
    writeln!(doc, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#).expect("write to string");
    writeln!(doc, r#"<g fill="black" fill-opacity="0.35">"#).expect("write to string");
    for p in points {
        match stereographic_project(p) {
            Ok([x, y]) => {
                let px = (x + extent) / (2.0 * extent) * SIZE;
                let py = (extent - y) / (2.0 * extent) * SIZE;
                if (0.0..=SIZE).contains(&px) && (0.0..=SIZE).contains(&py) {
                    writeln!(doc, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.2"/>"#).expect("write to string");
                }
            }
            Err(_) => skipped += 1,
        }
    }
    doc.push_str("</g>\n</svg>\n");
    (doc, skipped)
}

/// Reads the circle centres back out of a document from [`stereographic_svg`]
/// as projected-plane coordinates.
pub fn parse_svg_points(doc: &str, extent: f64) -> Vec<[f64; 2]> {
    const SIZE: f64 = 600.0;
    let attr = |line: &str, key: &str| -> Option<f64> {
        let start = line.find(&format!("{key}=\""))? + key.len() + 2;
        let end = start + line[start..].find('"')?;
        line[start..end].parse().ok()
    };
    doc.lines()
        .filter(|l| l.trim_start().starts_with("<circle"))
        .filter_map(|l| {
            let px = attr(l, "cx")?;
            let py = attr(l, "cy")?;
            Some([px / SIZE * 2.0 * extent - extent, extent - py / SIZE * 2.0 * extent])
        })
        .collect()
}

/// Occupancy of dark versus light checkerboard cells for points given in
/// the stereographically projected plane: each point is mapped back through
/// the inverse projection and the log map at the pole, divided by `scale`
/// and classified on [−4, 4]². Returns (dark, light) counts.
pub fn checkerboard_occupancy(projected: &[[f64; 2]], scale: f64) -> (usize, usize) {
    let mut dark = 0;
    let mut light = 0;
    for &q in projected {
        let Ok(b) = sphere_log_at_basepoint(&inverse_stereographic(q)) else {
            continue;
        };
        let c = b.coords();
        let p = [c[0] / scale, c[1] / scale];
        if p[0].abs() >= 4.0 || p[1].abs() >= 4.0 {
            continue;
        }
        if checkerboard_cell_is_dark(p) {
            dark += 1;
        } else {
            light += 1;
        }
    }
    (dark, light)
}

// -------------------------------------------------------------- export-csv

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportCsvConfig {
    pub input: PathBuf,
}

pub fn export_csv(cfg: &ExportCsvConfig, out: &Path) -> Result<StageReport, PipelineError> {
    let ds = read_dataset(&cfg.input)?;
    ensure_dir(out)?;
    let stem = cfg.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let path = out.join(format!("{stem}.csv"));
    let mut csv = String::with_capacity(ds.data.len() * 12);
    let header: Vec<String> = (0..ds.cols).map(|c| format!("c{c}")).collect();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for r in 0..ds.rows {
        let row: Vec<String> = ds.row(r).iter().map(|v| format!("{v:e}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_text(&path, &csv)?;
    Ok(StageReport {
        outputs: vec![path],
        summary: format!("{} rows × {} columns", ds.rows, ds.cols),
    })
}

// ------------------------------------------------------------------ replay

/// Re-runs every stage recorded in a manifest, redirecting each recorded
/// output directory into `out`. Inputs that were outputs of earlier stages
/// are redirected the same way.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<Vec<StageReport>, PipelineError> {
    let manifest = RunManifest::read(manifest_path)?;
    let out = absolute(out);
    let old_dirs: Vec<String> = manifest
        .stages
        .iter()
        .filter_map(|s| s.config.get("out").and_then(|v| v.as_str()).map(str::to_owned))
        .collect();
    let redirect = |v: &mut serde_json::Value| redirect_paths(v, &old_dirs, &out);
    let mut reports = Vec::new();
    for stage in &manifest.stages {
        let mut config = stage.config.clone();
        redirect(&mut config);
        if let Some(obj) = config.as_object_mut() {
            obj.remove("out");
        }
        let report = match stage.stage.as_str() {
            "gen-data" => gen_data(&parse_config(config)?, &out)?,
            "preprocess" => preprocess(&parse_config(config)?, &out)?,
            "train" => train_cmd(&parse_config(config)?, &out)?,
            "eval" => eval_cmd(&parse_config(config)?, &out)?.0,
            "sample" => sample_cmd(&parse_config(config)?, &out)?,
            other => return Err(PipelineError::Config(format!("unknown stage `{other}` in manifest"))),
        };
        reports.push(report);
    }
    Ok(reports)
}

fn redirect_paths(v: &mut serde_json::Value, old_dirs: &[String], new_dir: &Path) {
    match v {
        serde_json::Value::String(s) => {
            for old in old_dirs {
                if let Some(rest) = s.strip_prefix(old.as_str()) {
                    if rest.is_empty() || rest.starts_with(std::path::MAIN_SEPARATOR) {
                        *s = format!("{}{rest}", new_dir.display());
                        break;
                    }
                }
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(|x| redirect_paths(x, old_dirs, new_dir)),
        serde_json::Value::Object(o) => o.values_mut().for_each(|x| redirect_paths(x, old_dirs, new_dir)),
        _ => {}
    }
}

/// Convenience for tests and tools: 𝔭-coordinates of a dataset as points.
pub fn dataset_pcoords(ds: &Dataset, space: SpaceDescriptor) -> Result<Vec<PCoord>, PipelineError> {
    (0..ds.rows)
        .map(|i| PCoord::new(space, ds.row(i).to_vec()).map_err(PipelineError::from))
        .collect()
}
