use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cartanflow::pipeline::{self, parse_config, PipelineError, StageReport, EXIT_CONFIG};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

const THREADS_ENV: &str = "CARTANFLOW_THREADS";

#[derive(Parser)]
#[command(name = "cartanflow", version, about = "Flow matching on symmetric spaces through 𝔭-coordinates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample raw configurations (dw4, lj13, lj55) or planar checkerboard points.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        potential: Option<String>,
        #[arg(long)]
        walkers: Option<usize>,
        #[arg(long)]
        burnin: Option<usize>,
        /// Samples per walker (total points for the checkerboard).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        proposal_std: Option<f64>,
        #[arg(long)]
        thinning: Option<usize>,
    },
    /// Map raw rows to 𝔭-coordinates and split into train/test files.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Train the vector field with conditional flow matching.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a checkpoint's model and optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test negative log-likelihood by integrating the flow backwards.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        testset: Option<PathBuf>,
        /// Midpoint steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        chunks: Option<usize>,
        #[arg(long)]
        max_points: Option<usize>,
    },
    /// Draw samples and map them to the manifold.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Midpoint steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Scatter plot of stereographically projected samples (Sphere(2) only).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Convert a dataset file to CSV.
    ExportCsv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Re-run every stage recorded in a manifest into a new output directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Map<String, Value>, PipelineError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(PipelineError::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(PipelineError::Config(format!("{}: {e}", path.display()))),
    }
}

/// Sets `keys` (a dotted path) in `cfg` when `value` is present.
fn set<T: serde::Serialize>(cfg: &mut Map<String, Value>, keys: &str, value: Option<T>) {
    let Some(v) = value else { return };
    let mut parts: Vec<&str> = keys.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = cfg;
    for p in parts {
        let entry = node.entry(p).or_insert_with(|| json!({}));
        if !entry.is_object() {
            *entry = json!({});
        }
        node = entry.as_object_mut().expect("object");
    }
    node.insert(last.into(), serde_json::to_value(v).expect("flag serializes"));
}

/// Removes the output directory from the merged config.
fn take_out(cfg: &mut Map<String, Value>) -> Result<PathBuf, PipelineError> {
    match cfg.remove("out") {
        None => Ok(PathBuf::from(".")),
        Some(Value::String(s)) => Ok(PathBuf::from(s)),
        Some(other) => Err(PipelineError::Config(format!("`out` must be a path, got {other}"))),
    }
}

fn prepare(common: &Common) -> Result<(Map<String, Value>, PathBuf), PipelineError> {
    let mut cfg = load_config(common.config.as_deref())?;
    set(&mut cfg, "out", common.out.as_ref());
    let out = take_out(&mut cfg)?;
    Ok((cfg, out))
}

fn run(command: Command) -> Result<Vec<StageReport>, PipelineError> {
    let report = match command {
        Command::GenData {
            common,
            potential,
            walkers,
            burnin,
            samples,
            proposal_std,
            thinning,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            set(&mut cfg, "seed", common.seed);
            set(&mut cfg, "potential", potential);
            set(&mut cfg, "walkers", walkers);
            set(&mut cfg, "burnin", burnin);
            set(&mut cfg, "samples", samples);
            set(&mut cfg, "proposal_std", proposal_std);
            set(&mut cfg, "thinning", thinning);
            pipeline::gen_data(&parse_config(cfg.into())?, &out)?
        }
        Command::Preprocess {
            common,
            input,
            test_fraction,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            set(&mut cfg, "seed", common.seed);
            set(&mut cfg, "input", input);
            set(&mut cfg, "test_fraction", test_fraction);
            pipeline::preprocess(&parse_config(cfg.into())?, &out)?
        }
        Command::Train {
            common,
            dataset,
            steps,
            batch_size,
            lr,
            resume,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            set(&mut cfg, "seed", common.seed);
            set(&mut cfg, "dataset", dataset);
            set(&mut cfg, "train.steps", steps);
            set(&mut cfg, "train.batch_size", batch_size);
            set(&mut cfg, "train.lr", lr);
            set(&mut cfg, "resume", resume);
            pipeline::train_cmd(&parse_config(cfg.into())?, &out)?
        }
        Command::Eval {
            common,
            checkpoint,
            testset,
            steps,
            chunks,
            max_points,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            set(&mut cfg, "nll.seed", common.seed);
            set(&mut cfg, "checkpoint", checkpoint);
            set(&mut cfg, "testset", testset);
            set(&mut cfg, "nll.steps", steps);
            set(&mut cfg, "nll.chunks", chunks);
            set(&mut cfg, "max_points", max_points);
            pipeline::eval_cmd(&parse_config(cfg.into())?, &out)?.0
        }
        Command::Sample {
            common,
            checkpoint,
            count,
            steps,
            svg,
        } => {
            let (mut cfg, out) = prepare(&common)?;
            set(&mut cfg, "seed", common.seed);
            set(&mut cfg, "checkpoint", checkpoint);
            set(&mut cfg, "count", count);
            set(&mut cfg, "steps", steps);
            set(&mut cfg, "svg", svg);
            pipeline::sample_cmd(&parse_config(cfg.into())?, &out)?
        }
        Command::ExportCsv { common, input } => {
            let (mut cfg, out) = prepare(&common)?;
            if common.seed.is_some() {
                log::warn!("--seed has no effect on export-csv");
            }
            set(&mut cfg, "input", input);
            pipeline::export_csv(&parse_config(cfg.into())?, &out)?
        }
        Command::Replay { manifest, out } => return pipeline::replay(&manifest, &out),
    };
    Ok(vec![report])
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(reports) => {
            for r in reports {
                println!("{}", r.summary);
                for p in &r.outputs {
                    println!("  wrote {}", p.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            debug_assert!(code == EXIT_CONFIG || code == pipeline::EXIT_RUNTIME);
            ExitCode::from(code as u8)
        }
    }
}
