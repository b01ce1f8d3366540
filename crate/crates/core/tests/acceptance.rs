//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `CARTANFLOW_ACCEPTANCE=1,4` runs a subset;
//! `CARTANFLOW_FULL_PROTOCOL=1` adds the long DW4 run of criterion 7(b).

use std::path::Path;
use std::time::Instant;

use cartanflow::cnf::{integrate_midpoint, nll, IntegratorConfig, NllConfig};
use cartanflow::energy::{metropolis_sample, InitialState, McmcConfig};
use cartanflow::fm::NoiseSpec;
use cartanflow::io::{read_dataset, RunManifest};
use cartanflow::linalg::{skew_exp, so_log, symmetric_eigen, DenseMatrix, SkewMatrix};
use cartanflow::nn::{Activation, Architecture, ModelSpec, VectorFieldModel};
use cartanflow::pipeline::{
    self, checkerboard_occupancy, parse_svg_points, EvalCmdConfig, GenDataConfig, PotentialKind, PreprocessConfig,
    SampleCmdConfig, TrainCmdConfig, TrainSection,
};
use cartanflow::symspace::{
    geodesic, geodesic_symmetry, preprocess_point, ManifoldPoint, PCoord, SpaceDescriptor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ------------------------------------------------------------------ 1

fn random_skew(n: usize, max_norm: f64, rng: &mut ChaCha8Rng) -> SkewMatrix {
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = rng.sample(StandardNormal);
            m[(i, j)] = v;
            m[(j, i)] = -v;
        }
    }
    let (eig, _) = symmetric_eigen(&m.tr_matmul(&m)).expect("symmetric");
    let spectral = eig.iter().copied().fold(0.0, f64::max).sqrt();
    let target = rng.gen_range(0.0..max_norm);
    let m = if spectral > 0.0 { m.scale(target / spectral) } else { m };
    SkewMatrix::new(&m).expect("skew by construction")
}

fn exp_log_roundtrip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for n in [3, 4, 5, 13] {
        for _ in 0..1000 {
            let a = random_skew(n, 0.9 * std::f64::consts::PI, &mut rng);
            let back = so_log(&skew_exp(&a)).map_err(fail)?;
            worst = worst.max(back.matrix().sub(a.matrix()).frobenius_norm());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-8 && secs < 30.0,
        format!("max ‖log(exp A) − A‖_F = {worst:.2e} (< 1e-8), {secs:.1} s (< 30 s)"),
    )
}

// ------------------------------------------------------------------ 2

fn sphere_geodesics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_closed = 0.0f64;
    let mut worst_sym = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=5);
        let space = SpaceDescriptor::sphere(n).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let t = rng.gen_range(-2.0..2.0);
        let x = PCoord::new(space, b.clone()).unwrap();
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut expected: Vec<f64> = b.iter().map(|v| (norm * t).sin() * v / norm).collect();
        expected.push((norm * t).cos());
        let ManifoldPoint::Sphere(got) = geodesic(&x, t) else {
            return Err("geodesic left the sphere".into());
        };
        let err = got.iter().zip(&expected).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        worst_closed = worst_closed.max(err);

        let reflected = geodesic_symmetry(&geodesic(&x, t), space).map_err(fail)?;
        let ManifoldPoint::Sphere(r) = reflected else {
            return Err("symmetry left the sphere".into());
        };
        let ManifoldPoint::Sphere(back) = geodesic(&x, -t) else {
            return Err("geodesic left the sphere".into());
        };
        let err = r.iter().zip(&back).map(|(a, e)| (a - e).abs()).fold(0.0, f64::max);
        worst_sym = worst_sym.max(err);
    }
    check(
        worst_closed < 1e-9 && worst_sym < 1e-9,
        format!("great-circle error {worst_closed:.2e}, symmetry reversal error {worst_sym:.2e} (both < 1e-9)"),
    )
}

// ------------------------------------------------------------------ 3

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let d = rng.gen_range(1..=4);
    let architecture = if rng.gen_bool(0.5) {
        Architecture::Mlp {
            depth: rng.gen_range(1..=3),
            width: rng.gen_range(2..=6),
        }
    } else {
        Architecture::ConcatSquash {
            depth: rng.gen_range(1..=3),
            width: rng.gen_range(2..=6),
            gate_depth: rng.gen_range(1..=2),
            gate_width: rng.gen_range(2..=4),
        }
    };
    ModelSpec {
        architecture,
        input_dim: d,
        activation: if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Silu },
        zero_output: false,
    }
}

fn gradients() -> Outcome {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_grad = 0.0f64;
    let mut worst_jvp = 0.0f64;
    for _ in 0..20 {
        let spec = random_spec(&mut rng);
        let d = spec.input_dim;
        let mut model = VectorFieldModel::new(spec, rng.gen()).map_err(fail)?;
        let n = rng.gen_range(1..=5);
        let xs: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ys: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |m: &VectorFieldModel| {
            let out = m.forward_batch(&xs, &ts).unwrap();
            0.5 * out.iter().zip(&ys).map(|(o, y)| (o - y) * (o - y)).sum::<f64>()
        };
        let cache = model.forward_cached(&xs, &ts).map_err(fail)?;
        let dout: Vec<f64> = cache.output().iter().zip(&ys).map(|(o, y)| o - y).collect();
        let grad = model.backward(&cache, &dout);
        let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in 0..model.param_count() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let lp = loss(&model);
            model.params_mut()[i] = orig - h;
            let lm = loss(&model);
            model.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-4 * scale);
            worst_grad = worst_grad.max(err);
        }

        let x = &xs[..d];
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = ts[0];
        let jv = model.jvp(x, t, &dir).map_err(fail)?;
        let shift = |s: f64| -> Vec<f64> { x.iter().zip(&dir).map(|(a, b)| a + s * b).collect() };
        let up = model.forward(&shift(h), t).map_err(fail)?;
        let um = model.forward(&shift(-h), t).map_err(fail)?;
        let jscale = jv.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-6);
        for i in 0..d {
            worst_jvp = worst_jvp.max(((up[i] - um[i]) / (2.0 * h) - jv[i]).abs() / jscale);
        }
    }
    check(
        worst_grad < 1e-5 && worst_jvp < 1e-6,
        format!("backward max relative error {worst_grad:.2e} (< 1e-5), jvp {worst_jvp:.2e} (< 1e-6)"),
    )
}

// ------------------------------------------------------------------ 4

fn integrator_and_identity_nll() -> Outcome {
    let field = |x: &[f64], _t: f64| Ok(x.to_vec());
    let err = |n: usize| -> Result<f64, String> {
        let end = integrate_midpoint(field, &[1.0], &IntegratorConfig::new(n, 0.0, 1.0)).map_err(fail)?;
        Ok((end[0] - std::f64::consts::E).abs())
    };
    let mut ratios = Vec::new();
    for n in [10, 20, 40, 80] {
        ratios.push(err(n)? / err(2 * n)?);
    }
    let ratios_ok = ratios.iter().all(|r| (r - 4.0).abs() <= 0.3);

    let d = 4;
    let spec = ModelSpec {
        architecture: Architecture::concat_squash_default(),
        input_dim: d,
        activation: Activation::Tanh,
        zero_output: true,
    };
    let model = VectorFieldModel::new(spec, 0).map_err(fail)?;
    let noise = NoiseSpec::new(d, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let test: Vec<f64> = (0..200 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let report = nll(&model, &test, &noise, &NllConfig::default()).map_err(fail)?;
    let ce = -test.chunks(d).map(|x| noise.log_density(x)).sum::<f64>() / 200.0;
    let nll_err = (report.nll_mean - ce).abs();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    check(
        ratios_ok && nll_err < 1e-6,
        format!(
            "step-doubling error ratios [{}] (4.0 ± 0.3); identity NLL − cross-entropy = {nll_err:.1e} (< 1e-6)",
            shown.join(", ")
        ),
    )
}

// ------------------------------------------------------------------ 5

fn gen(kind: PotentialKind, walkers: usize, burnin: usize, samples: usize, seed: u64, out: &Path) -> Result<(), String> {
    let cfg = GenDataConfig {
        potential: kind,
        seed,
        params: None,
        walkers: Some(walkers),
        burnin: Some(burnin),
        samples: Some(samples),
        proposal_std: None,
        thinning: None,
        init: None,
        count: None,
    };
    pipeline::gen_data(&cfg, out).map(|_| ()).map_err(fail)
}

fn preprocess(out: &Path, test_fraction: f64, seed: u64) -> Result<PreprocessConfig, String> {
    let cfg = PreprocessConfig {
        input: out.join(pipeline::RAW_FILE),
        space: None,
        test_fraction,
        seed,
        checkerboard_scale: None,
    };
    pipeline::preprocess(&cfg, out).map_err(fail)?;
    Ok(cfg)
}

fn preprocessing_protocol() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let mut parts = Vec::new();
    let mut all_ok = true;
    for (kind, expected, walkers, burnin, samples) in [
        (PotentialKind::Dw4, 4, 20, 2000, 50),
        (PotentialKind::Lj13, 30, 8, 2000, 25),
        (PotentialKind::Lj55, 156, 4, 2000, 25),
    ] {
        let dir = tmp.path().join(format!("{kind:?}"));
        gen(kind, walkers, burnin, samples, 5, &dir)?;
        preprocess(&dir, 0.0, 0)?;
        let coords = read_dataset(&dir.join(pipeline::TRAIN_FILE)).map_err(fail)?;
        let m = RunManifest::for_artifact(&dir.join(pipeline::TRAIN_FILE)).map_err(fail)?;
        let summary = &m.last_stage("preprocess").ok_or("no preprocess stage")?.summary;
        let dropped = summary["dropped"].as_u64().unwrap_or(u64::MAX);
        let rows_in = summary["rows_in"].as_u64().unwrap_or(0);
        let frac = dropped as f64 / rows_in.max(1) as f64;
        all_ok &= coords.cols == expected && frac < 0.01;
        parts.push(format!("{kind:?} → {} columns, dropped {dropped}/{rows_in}", coords.cols));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for (k, n) in [(2, 4), (3, 13), (3, 55)] {
        let space = SpaceDescriptor::grassmann(k, n).unwrap();
        for _ in 0..50 {
            let x = DenseMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal));
            let r = DenseMatrix::from_fn(k, k, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Less => rng.gen_range(-1.0..1.0),
                std::cmp::Ordering::Equal => rng.gen_range(0.2..2.0),
                std::cmp::Ordering::Greater => 0.0,
            });
            let a = preprocess_point(&x, space).map_err(fail)?;
            let b = preprocess_point(&x.matmul(&r), space).map_err(fail)?;
            let err = a.coords().iter().zip(b.coords()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    all_ok &= worst < 1e-9;
    check(
        all_ok,
        format!("{}; QR invariance error {worst:.2e} (< 1e-9)", parts.join(", ")),
    )
}

// ------------------------------------------------------------------ 6

fn checkerboard() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(fail)?;
    let out = tmp.path();
    let gen_cfg = GenDataConfig {
        potential: PotentialKind::Checkerboard,
        seed: 3,
        params: None,
        walkers: None,
        burnin: None,
        samples: None,
        proposal_std: None,
        thinning: None,
        init: None,
        count: Some(20_000),
    };
    pipeline::gen_data(&gen_cfg, out).map_err(fail)?;
    preprocess(out, 0.0, 0)?;
    let manifest = RunManifest::for_artifact(&out.join(pipeline::TRAIN_FILE)).map_err(fail)?;
    let scale = manifest.last_stage("preprocess").ok_or("no preprocess stage")?.config["checkerboard_scale"]
        .as_f64()
        .ok_or("no checkerboard scale")?;
    let train_cfg = TrainCmdConfig {
        dataset: out.join(pipeline::TRAIN_FILE),
        seed: 0,
        space: None,
        architecture: None,
        activation: Activation::default(),
        zero_output: false,
        noise_sigma: 1.0,
        train: TrainSection {
            steps: 15_000,
            lr: 1e-3,
            eval_every: 500,
            ..Default::default()
        },
        resume: None,
    };
    pipeline::train_cmd(&train_cfg, out).map_err(fail)?;
    let svg = out.join("samples.svg");
    let sample_cfg = SampleCmdConfig {
        checkpoint: out.join(pipeline::CHECKPOINT_FILE),
        count: 5000,
        steps: 100,
        seed: 1,
        svg: Some(svg.clone()),
        svg_extent: 1.25,
    };
    pipeline::sample_cmd(&sample_cfg, out).map_err(fail)?;
    let doc = std::fs::read_to_string(&svg).map_err(fail)?;
    let (dark, light) = checkerboard_occupancy(&parse_svg_points(&doc, 1.25), scale);
    let contrast = dark as f64 / light.max(1) as f64;
    let secs = start.elapsed().as_secs_f64();
    check(
        contrast > 3.0 && secs <= 600.0,
        format!("dark/light occupancy {dark}/{light} = {contrast:.2} (> 3), {secs:.0} s (≤ 600 s)"),
    )
}

// ------------------------------------------------------------------ 7

/// Loss trends down: least-squares slope negative, last block below the
/// first, and no block mean rising above its predecessor by more than two
/// standard errors of the predecessor.
fn monotone_in_trend(losses: &[(u64, f64)], blocks: usize) -> (bool, Vec<f64>) {
    let n = losses.len() as f64;
    let mx = losses.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = losses.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = losses.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let slope_ok = cov < 0.0;
    let size = losses.len().div_ceil(blocks);
    let stats: Vec<(f64, f64)> = losses
        .chunks(size)
        .map(|c| {
            let m = c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|p| (p.1 - m).powi(2)).sum::<f64>() / (c.len().max(2) - 1) as f64;
            (m, (var / c.len() as f64).sqrt())
        })
        .collect();
    let steps_ok = stats.windows(2).all(|w| w[1].0 <= w[0].0 + 2.0 * w[0].1);
    let ends_ok = stats.last().unwrap().0 < stats[0].0;
    (slope_ok && steps_ok && ends_ok, stats.iter().map(|s| s.0).collect())
}

fn dw4_run(dir: &Path, walkers: usize, samples: usize, train: TrainSection) -> Result<(f64, f64, Vec<(u64, f64)>), String> {
    gen(PotentialKind::Dw4, walkers, 2000, samples, 11, dir)?;
    preprocess(dir, 1.0 / 11.0, 0)?;
    let train_cfg = TrainCmdConfig {
        dataset: dir.join(pipeline::TRAIN_FILE),
        seed: 0,
        space: None,
        architecture: None,
        activation: Activation::default(),
        zero_output: false,
        noise_sigma: 1.0,
        train,
        resume: None,
    };
    pipeline::train_cmd(&train_cfg, dir).map_err(fail)?;
    let eval_cfg = EvalCmdConfig {
        checkpoint: dir.join(pipeline::CHECKPOINT_FILE),
        testset: dir.join(pipeline::TEST_FILE),
        nll: NllConfig::default(),
        max_points: None,
    };
    let (_, report) = pipeline::eval_cmd(&eval_cfg, dir).map_err(fail)?;
    let test = read_dataset(&dir.join(pipeline::TEST_FILE)).map_err(fail)?;
    let noise = NoiseSpec::new(test.cols, 0);
    let baseline = -test.data.chunks(test.cols).map(|x| noise.log_density(x)).sum::<f64>() / test.rows as f64;
    let csv = std::fs::read_to_string(dir.join(pipeline::LOSS_FILE)).map_err(fail)?;
    let losses = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (s, v) = l.split_once(',').ok_or("bad loss row")?;
            Ok((s.parse().map_err(fail)?, v.parse().map_err(fail)?))
        })
        .collect::<Result<Vec<(u64, f64)>, String>>()?;
    Ok((report.nll_mean, baseline, losses))
}

fn dw4_desk_run() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(fail)?;
    let train = TrainSection {
        batch_size: 128,
        steps: 10_000,
        eval_every: 100,
        lr: 5e-4,
        ..Default::default()
    };
    // 100 walkers × 110 samples, 1/11 held out: 10⁴ training points.
    let (nll_mean, baseline, losses) = dw4_run(tmp.path(), 100, 110, train)?;
    let (trend_ok, blocks) = monotone_in_trend(&losses, 5);
    let secs = start.elapsed().as_secs_f64();
    let gain = baseline - nll_mean;
    let shown: Vec<String> = blocks.iter().map(|b| format!("{b:.3}")).collect();
    let mut detail = format!(
        "(a) test NLL {nll_mean:.3} vs identity {baseline:.3}, gain {gain:.3} nat (≥ 1); loss block means [{}]; {secs:.0} s (≤ 1800 s)",
        shown.join(", ")
    );
    let ok = gain >= 1.0 && trend_ok && secs <= 1800.0;
    if std::env::var("CARTANFLOW_FULL_PROTOCOL").is_ok_and(|v| v == "1") {
        let full = TrainSection {
            batch_size: 512,
            steps: 50_000,
            eval_every: 500,
            lr: 1e-4,
            ..Default::default()
        };
        let dir = tmp.path().join("full");
        match dw4_run(&dir, 1000, 111, full) {
            Ok((nll_full, _, _)) => detail.push_str(&format!(
                "; (b) full protocol NLL {nll_full:.3}, reference −1.13, |Δ| {:.3} (reported only)",
                (nll_full + 1.13).abs()
            )),
            Err(e) => detail.push_str(&format!("; (b) full protocol failed: {e} (reported only)")),
        }
    } else {
        detail.push_str("; (b) full protocol not run (CARTANFLOW_FULL_PROTOCOL=1)");
    }
    check(ok, detail)
}

// ------------------------------------------------------------------ 8

fn mcmc() -> Outcome {
    let flat = McmcConfig {
        walkers: 4,
        burnin_steps: 100,
        samples_per_walker: 100,
        proposal_std: 1.0,
        seed: 8,
        thinning: 1,
    };
    let run = metropolis_sample(|_| 0.0, 3, 2, InitialState::Gaussian { std: 1.0 }, &flat);
    let flat_rate = run.acceptance_rate();

    let cfg = McmcConfig {
        walkers: 10,
        burnin_steps: 1000,
        samples_per_walker: 10_000,
        proposal_std: 2.4,
        seed: 9,
        thinning: 10,
    };
    let quad = |x: &[f64]| 0.5 * x[0] * x[0];
    let run = metropolis_sample(quad, 1, 1, InitialState::Gaussian { std: 1.0 }, &cfg);
    let xs: Vec<f64> = run.samples.iter().map(|s| s[0]).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Standard error of the sample variance from the fourth central moment,
    // inflated by the integrated autocorrelation of x² along each chain.
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let tau = integrated_autocorrelation(&run.samples, cfg.samples_per_walker, |x| x * x);
    let se = ((m4 - var * var) / n * tau).sqrt();

    let again = metropolis_sample(quad, 1, 1, InitialState::Gaussian { std: 1.0 }, &cfg);
    let bytes = |r: &cartanflow::energy::McmcRun| -> Vec<u8> {
        r.samples.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
    };
    let identical = bytes(&run) == bytes(&again);
    check(
        flat_rate == 1.0 && (var - 1.0).abs() < 3.0 * se && identical && xs.len() == 100_000,
        format!(
            "flat acceptance {flat_rate}; Gaussian variance {var:.4} at {} samples, |Δ| {:.4} < 3·SE {:.4}; seeded rerun byte-identical: {identical}",
            xs.len(),
            (var - 1.0).abs(),
            3.0 * se
        ),
    )
}

/// 1 + 2Σρ_k for f(x) along each walker's chain, summed until ρ turns negative.
fn integrated_autocorrelation(samples: &[Vec<f64>], per_walker: usize, f: impl Fn(f64) -> f64) -> f64 {
    let ys: Vec<f64> = samples.iter().map(|s| f(s[0])).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    let mut tau = 1.0;
    for lag in 1..per_walker / 10 {
        let mut acc = 0.0;
        let mut count = 0;
        for chain in ys.chunks(per_walker) {
            for i in 0..chain.len() - lag {
                acc += (chain[i] - mean) * (chain[i + lag] - mean);
                count += 1;
            }
        }
        let rho = acc / count as f64 / var;
        if rho <= 0.0 {
            break;
        }
        tau += 2.0 * rho;
    }
    tau
}

// ------------------------------------------------------------------ 9

fn end_to_end_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let a = tmp.path().join("a");
    gen(PotentialKind::Dw4, 8, 500, 50, 21, &a)?;
    preprocess(&a, 0.1, 2)?;
    let train_cfg = TrainCmdConfig {
        dataset: a.join(pipeline::TRAIN_FILE),
        seed: 3,
        space: None,
        architecture: Some(Architecture::ConcatSquash {
            depth: 2,
            width: 32,
            gate_depth: 1,
            gate_width: 8,
        }),
        activation: Activation::default(),
        zero_output: false,
        noise_sigma: 1.0,
        train: TrainSection {
            batch_size: 64,
            steps: 100,
            eval_every: 10,
            ..Default::default()
        },
        resume: None,
    };
    pipeline::train_cmd(&train_cfg, &a).map_err(fail)?;
    let eval_cfg = EvalCmdConfig {
        checkpoint: a.join(pipeline::CHECKPOINT_FILE),
        testset: a.join(pipeline::TEST_FILE),
        nll: NllConfig {
            steps: 20,
            ..Default::default()
        },
        max_points: None,
    };
    pipeline::eval_cmd(&eval_cfg, &a).map_err(fail)?;

    let b = tmp.path().join("b");
    let stages = pipeline::replay(&a.join("nll.manifest.json"), &b).map_err(fail)?;
    let mut differing = Vec::new();
    for f in [pipeline::RAW_FILE, pipeline::TRAIN_FILE, pipeline::TEST_FILE, pipeline::CHECKPOINT_FILE, pipeline::REPORT_FILE] {
        let x = std::fs::read(a.join(f)).map_err(fail)?;
        let y = std::fs::read(b.join(f)).map_err(fail)?;
        if x != y {
            differing.push(f);
        }
    }
    check(
        differing.is_empty() && stages.len() == 4,
        format!(
            "replayed {} stages from the manifest; differing artifacts: {:?}",
            stages.len(),
            differing
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let only: Option<Vec<usize>> = std::env::var("CARTANFLOW_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exp/log roundtrip", exp_log_roundtrip),
        ("sphere geodesics and symmetry", sphere_geodesics),
        ("gradient correctness", gradients),
        ("integrator order and identity NLL", integrator_and_identity_nll),
        ("preprocessing protocol", preprocessing_protocol),
        ("checkerboard on S²", checkerboard),
        ("DW4 desk-scale NLL", dw4_desk_run),
        ("MCMC correctness", mcmc),
        ("end-to-end reproducibility", end_to_end_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} PASS [{name}] {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} FAIL [{name}] {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
