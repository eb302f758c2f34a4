use std::path::{Path, PathBuf};

use serde::Serialize;

use mimetic::attention::{expected_logits, mc_logit_mean};
use mimetic::inspect::{export_heatmap, load_attention, product_analysis, vp_head_slice, Checkpoint, SignPattern};
use mimetic::linalg::hash64;
use mimetic::mimetic::{feasibility_sweep, fit_through_origin, init_transformer, OriginFit, SweepGrid, SweepPoint};
use mimetic::posembed;
use mimetic::toytrain::{grad_check, run_many, GradCheckReport, InitMode, TrainConfig};
use mimetic::{Error, InitScope, InitSpec, Method, ModelArch, PosEmbedKind, Result, Rng, VpFactorization, VpSign};

use crate::output::{matrix_csv, par_map, OutDir};
use crate::{
    Cli, Command, ExpectArgs, GenArgs, GradcheckArgs, InspectArgs, MethodArg, PosEmbedArg, Preset, SignArg,
    SweepArgs, TrainArgs,
};

/// Tolerance on the gradient check's relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub enum Outcome {
    Success,
    NumericFailure,
}

pub fn parse_init_mode(s: &str) -> std::result::Result<InitMode, String> {
    InitMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
        let names: Vec<&str> = InitMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown init mode `{s}` (expected one of: {})", names.join(", "))
    })
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut out = OutDir::create(&cli.global.out_dir)?;
    let seed = cli.global.seed;
    let threads = cli.global.threads as usize;
    let (name, inputs, outcome) = match &cli.command {
        Command::Gen(a) => ("gen", vec![], gen(a, seed, &mut out)?),
        Command::Inspect(a) => {
            let path = resolve_input(&a.path, &cli.global.out_dir)?;
            let outcome = inspect(a, &path, &mut out)?;
            ("inspect", vec![path], outcome)
        }
        Command::Sweep(a) => ("sweep", vec![], sweep(a, seed, threads, &mut out)?),
        Command::Expect(a) => ("expect", vec![], expect(a, seed, &mut out)?),
        Command::Train(a) => ("train", vec![], train(a, seed, threads, &mut out)?),
        Command::Gradcheck(a) => ("gradcheck", vec![], gradcheck(a, seed, &mut out)?),
    };
    out.write_manifest(name, seed, &inputs)?;
    Ok(outcome)
}

fn resolve_input(path: &Path, out_dir: &Path) -> Result<PathBuf> {
    if path.exists() {
        return Ok(path.to_path_buf());
    }
    let under = out_dir.join(path);
    if under.exists() {
        Ok(under)
    } else {
        Err(Error::InvalidParameter(format!("no checkpoint at {}", path.display())))
    }
}

fn gen(a: &GenArgs, seed: u64, out: &mut OutDir) -> Result<Outcome> {
    let (arch, preset_spec, default_name) = match a.preset {
        Preset::VitTinyCifar => (ModelArch::vit_tiny_cifar(), InitSpec::vision(), "vit-tiny-cifar.mim"),
        Preset::VitTinyImagenet => (
            ModelArch::vit_tiny_imagenet(),
            InitSpec::vision_imagenet(),
            "vit-tiny-imagenet.mim",
        ),
        Preset::Lang => (ModelArch::language(), InitSpec::language(), "lang.mim"),
    };
    let mut spec = if a.baseline { InitSpec::baseline() } else { preset_spec };
    spec.method = match a.method {
        MethodArg::Svd => Method::Svd,
        MethodArg::Equal => Method::EqualMatrix,
    };
    if let Some(sign) = a.vp_sign {
        spec.vp_sign = match sign {
            SignArg::Negative => VpSign::Negative,
            SignArg::Positive => VpSign::Positive,
        };
    }
    if a.as_written {
        spec.vp_factorization = VpFactorization::AsWritten;
    }
    let scope = if a.full { InitScope::Full } else { InitScope::Attention };
    let ckpt = init_transformer(&arch, &spec, seed, scope)?;
    let rel = a.out.clone().unwrap_or_else(|| PathBuf::from(default_name));
    let path = out.write(&rel, ckpt.to_bytes())?;
    println!(
        "wrote {} ({} tensors, {} layers, d = {})",
        path.display(),
        ckpt.tensors.len(),
        arch.depth,
        arch.d
    );
    Ok(Outcome::Success)
}

fn inspect(a: &InspectArgs, path: &Path, out: &mut OutDir) -> Result<Outcome> {
    let ckpt = Checkpoint::read(path)?;
    let report = product_analysis(&ckpt)?;
    out.write_json("report.json", &report)?;
    if !a.no_heatmaps {
        let dir = out.path("heatmaps");
        std::fs::create_dir_all(&dir)?;
        let clip = Some(a.clip);
        for (l, layer) in load_attention(&ckpt)?.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                let files = export_heatmap(&head.product(), &dir.join(format!("l{l}.h{h}.qk")), clip)?;
                record_heatmap(out, files);
            }
            let files = export_heatmap(&layer.vp.product(), &dir.join(format!("l{l}.vp")), clip)?;
            record_heatmap(out, files);
            let k = report.d / report.heads.max(1);
            for h in 0..layer.heads.len() {
                let slice = vp_head_slice(&layer.vp, h, k);
                let files = export_heatmap(&slice, &dir.join(format!("l{l}.h{h}.vp")), clip)?;
                record_heatmap(out, files);
            }
        }
    }
    println!(
        "{} layers: {} vision_like, {} language_like, {} indeterminate",
        report.depth,
        report.count(SignPattern::VisionLike),
        report.count(SignPattern::LanguageLike),
        report.count(SignPattern::Indeterminate)
    );
    for layer in &report.layers {
        let qk: Vec<String> = layer.heads.iter().map(|h| format!("{:.2}", h.qk.diag_z_score)).collect();
        println!(
            "layer {:>2}: qk z [{}], vp z {:.2} -> {}",
            layer.layer,
            qk.join(", "),
            layer.vp.diag_z_score,
            serde_json::to_value(layer.sign_pattern)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default()
        );
    }
    Ok(Outcome::Success)
}

fn record_heatmap(out: &mut OutDir, files: mimetic::inspect::HeatmapFiles) {
    out.record(files.csv);
    out.record(files.pgm);
    out.record(files.sidecar);
}

#[derive(Serialize)]
struct SweepSummary {
    method: &'static str,
    d: usize,
    k: usize,
    seed: u64,
    points: usize,
    /// `β̂ = slope · α̂` fitted through the origin (equal matrices only).
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<OriginFit>,
    /// `√(k/d)`, the slope expected for equal matrices.
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_alpha_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_abs_beta_error: Option<f64>,
}

fn sweep(a: &SweepArgs, seed: u64, threads: usize, out: &mut OutDir) -> Result<Outcome> {
    let (method, grid) = match a.method {
        MethodArg::Equal => {
            let n = a.grid.unwrap_or(20);
            let scales = (1..=n).map(|i| i as f64 / n as f64).collect();
            (Method::EqualMatrix, SweepGrid::Scales(scales))
        }
        MethodArg::Svd => (Method::Svd, SweepGrid::unit_square(a.grid.unwrap_or(5))),
    };
    let singles: Vec<SweepGrid> = match &grid {
        SweepGrid::Scales(s) => s.iter().map(|&c| SweepGrid::Scales(vec![c])).collect(),
        SweepGrid::AlphaBeta(p) => p.iter().map(|&ab| SweepGrid::AlphaBeta(vec![ab])).collect(),
    };
    if singles.is_empty() {
        return Err(Error::InvalidParameter("the sweep grid is empty".into()));
    }
    // Each point has its own generator, so the thread count cannot matter.
    let rows = par_map(&singles, threads, |i, g| {
        let mut rng = Rng::seed_from_u64(hash64(seed, i as u64, 0));
        feasibility_sweep(method, a.d, a.k, g, &mut rng).map(|mut r| r.remove(0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut csv = String::new();
    let (mut alpha_err, mut beta_err) = (0.0f64, 0.0f64);
    for (i, r) in rows.iter().enumerate() {
        if i == 0 {
            csv.push_str(match r.point {
                SweepPoint::Scale(_) => "scale,alpha_hat,beta_hat\n",
                SweepPoint::AlphaBeta { .. } => "alpha,beta,alpha_hat,beta_hat\n",
            });
        }
        let g = mimetic::inspect::format_g17;
        match r.point {
            SweepPoint::Scale(c) => csv.push_str(&format!("{},{},{}\n", g(c), g(r.alpha_hat), g(r.beta_hat))),
            SweepPoint::AlphaBeta { alpha, beta } => {
                alpha_err = alpha_err.max((r.alpha_hat - alpha).abs());
                beta_err = beta_err.max((r.beta_hat - beta).abs());
                csv.push_str(&format!("{},{},{},{}\n", g(alpha), g(beta), g(r.alpha_hat), g(r.beta_hat)));
            }
        }
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha_hat, r.beta_hat)).collect();
    let is_svd = method == Method::Svd;
    let summary = SweepSummary {
        method: if is_svd { "svd" } else { "equal" },
        d: a.d,
        k: a.k,
        seed,
        points: rows.len(),
        fit: (!is_svd).then(|| fit_through_origin(&pairs)),
        expected_slope: (!is_svd).then(|| (a.k as f64 / a.d as f64).sqrt()),
        max_abs_alpha_error: is_svd.then_some(alpha_err),
        max_abs_beta_error: is_svd.then_some(beta_err),
    };
    out.write("sweep.csv", csv)?;
    out.write_json("sweep.json", &summary)?;
    match (&summary.fit, summary.max_abs_beta_error) {
        (Some(fit), _) => println!("{} points, slope {:.4}, R² {:.6}", summary.points, fit.slope, fit.r_squared),
        (None, Some(err)) => println!("{} points, max |beta_hat - beta| {err:.4}", summary.points),
        (None, None) => {}
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct ExpectSummary {
    d: usize,
    n: usize,
    trials: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    pos_embed: &'static str,
    /// Largest `|MC mean − expected| / stderr` over entries.
    max_abs_z: f64,
    /// Share of entries within five standard errors.
    within_5_stderr: f64,
    mean_stderr: f64,
}

fn expect(a: &ExpectArgs, seed: u64, out: &mut OutDir) -> Result<Outcome> {
    let kind = match a.pos_embed {
        PosEmbedArg::Sinusoidal => PosEmbedKind::Sinusoidal,
        PosEmbedArg::Random => PosEmbedKind::Random,
    };
    let mut rng = Rng::seed_from_u64(seed);
    let pe = posembed::build(kind, a.n, a.d, a.gamma, false, &mut rng)?;
    let expected = expected_logits(a.beta, &pe, a.d)?;
    let mc = mc_logit_mean(a.alpha, a.beta, &pe, a.d, a.trials, &mut rng)?;
    let (mut max_z, mut within) = (0.0f64, 0usize);
    for ((e, m), s) in expected.as_slice().iter().zip(mc.mean.as_slice()).zip(mc.stderr.as_slice()) {
        let z = if *s > 0.0 { (m - e).abs() / s } else if m == e { 0.0 } else { f64::INFINITY };
        max_z = max_z.max(z);
        within += usize::from(z <= 5.0);
    }
    let cells = expected.len().max(1);
    let summary = ExpectSummary {
        d: a.d,
        n: a.n,
        trials: a.trials,
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        pos_embed: kind.as_str(),
        max_abs_z: max_z,
        within_5_stderr: within as f64 / cells as f64,
        mean_stderr: mc.stderr.as_slice().iter().sum::<f64>() / cells as f64,
    };
    out.write("expect.expected.csv", matrix_csv(&expected))?;
    out.write("expect.mc_mean.csv", matrix_csv(&mc.mean))?;
    out.write("expect.mc_stderr.csv", matrix_csv(&mc.stderr))?;
    out.write_json("expect.json", &summary)?;
    println!(
        "max |z| {:.3}, {:.1}% of entries within 5 stderr",
        summary.max_abs_z,
        100.0 * summary.within_5_stderr
    );
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    init_mode: InitMode,
    steps: usize,
    initial_test_loss: f64,
    final_test_loss: f64,
    final_test_accuracy: f64,
    final_train_loss: Option<f64>,
}

fn train(a: &TrainArgs, seed: u64, threads: usize, out: &mut OutDir) -> Result<Outcome> {
    if a.seeds == 0 {
        return Err(Error::InvalidParameter("--seeds must be at least 1".into()));
    }
    let cfgs: Vec<TrainConfig> = (0..a.seeds)
        .map(|i| TrainConfig::toy(a.init_mode, seed + i, a.steps))
        .collect();
    let mut runs = Vec::with_capacity(cfgs.len());
    for result in run_many(&cfgs, threads) {
        let m = result?;
        out.write(format!("train.{}.seed{}.loss.csv", m.init_mode.as_str(), m.seed), m.loss_csv())?;
        println!(
            "{} seed {}: test loss {:.4} -> {:.4}, accuracy {:.3} ({:.1}s)",
            m.init_mode.as_str(),
            m.seed,
            m.initial_test_loss,
            m.final_test_loss,
            m.final_test_accuracy,
            m.wall_clock_seconds
        );
        runs.push(RunSummary {
            seed: m.seed,
            init_mode: m.init_mode,
            steps: m.steps,
            initial_test_loss: m.initial_test_loss,
            final_test_loss: m.final_test_loss,
            final_test_accuracy: m.final_test_accuracy,
            final_train_loss: m.train_loss.last().copied(),
        });
    }
    out.write_json("train.summary.json", &runs)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct GradcheckEntry {
    init_mode: InitMode,
    passed: bool,
    report: GradCheckReport,
}

fn gradcheck(a: &GradcheckArgs, seed: u64, out: &mut OutDir) -> Result<Outcome> {
    let modes = match a.init_mode {
        Some(m) => vec![m],
        None => InitMode::ALL.to_vec(),
    };
    let arch = ModelArch::tiny();
    let mut entries = Vec::with_capacity(modes.len());
    for mode in modes {
        let report = grad_check(&arch, mode, seed, a.eps)?;
        let passed = report.max_rel_error < GRAD_TOLERANCE;
        println!(
            "{} {}: max relative error {:.3e} ({} coordinates, worst in {})",
            if passed { "PASS" } else { "FAIL" },
            mode.as_str(),
            report.max_rel_error,
            report.coords,
            report.worst
        );
        entries.push(GradcheckEntry {
            init_mode: mode,
            passed,
            report,
        });
    }
    out.write_json("gradcheck.json", &entries)?;
    if entries.iter().all(|e| e.passed) {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::NumericFailure)
    }
}
