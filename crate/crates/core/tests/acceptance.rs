//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line before asserting. The lines go straight to stdout,
//! past the test harness's capture, so a plain `cargo test` shows them.
//!
//! Runtime limits are checked against the CPU time of the test's own
//! thread, so tests sharing a core do not charge each other.

use std::io::Write;
use std::time::Duration;

use mimetic::attention::{attention_map, diagonal_mass, expected_logits, mc_logit_mean, SkipMode, Variant};
use mimetic::inspect::{load_attention, product_analysis, Checkpoint, SignPattern};
use mimetic::linalg::{gaussian_matrix, hash64, svd};
use mimetic::mimetic::{
    construct_qk_head, construct_vp, estimate_alpha_beta, feasibility_sweep, fit_through_origin, init_transformer,
    SweepGrid,
};
use mimetic::posembed;
use mimetic::toytrain::{grad_check_config, train_toy, InitMode, TrainConfig};
use mimetic::{InitScope, InitSpec, Matrix, Method, ModelArch, Rng, VpFactorization, VpSign};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// CPU time consumed by the calling thread.
fn thread_cpu() -> Duration {
    let stat = std::fs::read_to_string("/proc/thread-self/schedstat").expect("schedstat is readable");
    let ns: u64 = stat.split_whitespace().next().and_then(|s| s.parse().ok()).expect("schedstat format");
    Duration::from_nanos(ns)
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id:>2} {verdict} {name}: {detail}").expect("stdout is writable");
}

/// The target `α·Z + s·β·I` drawn from the same generator state the
/// constructors see.
fn target(d: usize, alpha: f64, signed_beta: f64, rng: &Rng) -> Matrix {
    let mut m = gaussian_matrix(d, d, 1.0 / (d as f64).sqrt(), &mut rng.clone()).scale(alpha);
    m.add_diag(signed_beta);
    m
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

#[test]
fn c01_vp_reconstruction() {
    let start = thread_cpu();
    let mut worst: f64 = 0.0;
    for d in [8, 64, 192] {
        for alpha in [0.1, 0.4, 0.7] {
            for beta in [0.1, 0.4, 0.7] {
                let rng = Rng::seed_from_u64(hash64(1, d as u64, (alpha * 10.0 + beta * 100.0) as u64));
                let want = target(d, alpha, -beta, &rng);
                let vp = construct_vp(
                    d,
                    alpha,
                    beta,
                    VpSign::Negative,
                    VpFactorization::SymmetricSqrt,
                    &mut rng.clone(),
                )
                .unwrap();
                let rel = vp.product().sub(&want).frobenius_norm() / want.frobenius_norm();
                worst = worst.max(rel);
            }
        }
    }
    let cpu = thread_cpu() - start;
    let pass = worst < 1e-8 && cpu < Duration::from_secs(10);
    report(1, "value/projection reconstruction", pass, &format!("max rel err {worst:.3e} (< 1e-8), cpu {cpu:.2?} (< 10 s)"));
    assert!(pass);
}

#[test]
fn c02_qk_eckart_young() {
    let start = thread_cpu();
    let d = 192;
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let k = [16, 64, 96][case as usize % 3];
        let rng = Rng::seed_from_u64(hash64(2, case, 0));
        let want = target(d, 0.7, 0.7, &rng);
        let head = construct_qk_head(d, k, 0.7, 0.7, &mut rng.clone()).unwrap();
        let residual = want.sub(&head.product()).frobenius_norm().powi(2);
        let tail = svd(&want).unwrap().tail_energy(k);
        worst = worst.max((residual - tail).abs() / tail);
    }
    let cpu = thread_cpu() - start;
    let pass = worst < 1e-9 && cpu < Duration::from_secs(30);
    report(2, "query/key Eckart-Young optimality", pass, &format!("max rel gap {worst:.3e} (< 1e-9), cpu {cpu:.2?} (< 30 s)"));
    assert!(pass);
}

#[test]
fn c03_estimator_recovery() {
    let d = 192;
    let mut details = Vec::new();
    let mut pass = true;
    for (alpha, beta) in [(0.7, 0.7), (0.4, 0.4)] {
        let (mut alphas, mut betas) = (Vec::new(), Vec::new());
        for seed in 0..100 {
            let mut rng = Rng::seed_from_u64(hash64(3, seed, (alpha * 10.0) as u64));
            let head = construct_qk_head(d, d, alpha, beta, &mut rng).unwrap();
            let est = estimate_alpha_beta(&head.product(), VpSign::Positive).unwrap();
            alphas.push(est.alpha_hat);
            betas.push(est.beta_hat);
        }
        for (name, truth, xs) in [("alpha", alpha, &alphas), ("beta", beta, &betas)] {
            let (mean, std) = mean_std(xs);
            let se = std / (xs.len() as f64).sqrt();
            let z = (mean - truth) / se;
            pass &= z.abs() < 3.0;
            details.push(format!("{name}={truth}: mean {mean:.5}, {z:+.2} se"));
        }
    }
    report(3, "estimator recovery", pass, &format!("{} (within 3 se)", details.join("; ")));
    assert!(pass);
}

#[test]
fn c04_feasibility_region() {
    let (d, k) = (192, 64);
    let scales: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    let mut rng = Rng::seed_from_u64(4);
    let rows = feasibility_sweep(Method::EqualMatrix, d, k, &SweepGrid::Scales(scales), &mut rng).unwrap();
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha_hat, r.beta_hat)).collect();
    let fit = fit_through_origin(&pairs);
    let expected = (k as f64 / d as f64).sqrt();
    let slope_err = (fit.slope / expected - 1.0).abs();

    let rows = feasibility_sweep(Method::Svd, d, d, &SweepGrid::unit_square(5), &mut rng).unwrap();
    let beta_err = rows
        .iter()
        .map(|r| match r.point {
            mimetic::mimetic::SweepPoint::AlphaBeta { beta, .. } => (r.beta_hat - beta).abs(),
            mimetic::mimetic::SweepPoint::Scale(_) => f64::INFINITY,
        })
        .fold(0.0, f64::max);

    let pass = fit.r_squared > 0.99 && slope_err < 0.10 && rows.len() == 25 && beta_err < 0.05;
    report(
        4,
        "feasibility region",
        pass,
        &format!(
            "equal R2 {:.5} (> 0.99), slope {:.4} vs {expected:.4} ({:.1}% < 10%); svd 5x5 max |beta err| {beta_err:.4} (< 0.05)",
            fit.r_squared,
            fit.slope,
            100.0 * slope_err
        ),
    );
    assert!(pass);
}

#[test]
fn c05_expected_logits() {
    let start = thread_cpu();
    let (d, n) = (64, 8);
    let pe = posembed::sinusoidal(n, d, 1.0, false).unwrap();
    let want = expected_logits(0.7, &pe, d).unwrap();
    let mc = mc_logit_mean(0.7, 0.7, &pe, d, 20_000, &mut Rng::seed_from_u64(5)).unwrap();
    let max_z = want
        .as_slice()
        .iter()
        .zip(mc.mean.as_slice())
        .zip(mc.stderr.as_slice())
        .map(|((w, m), s)| (w - m).abs() / s)
        .fold(0.0, f64::max);
    let small = mc_logit_mean(0.7, 0.7, &pe, d, 5_000, &mut Rng::seed_from_u64(55)).unwrap();
    let mean_se = |m: &Matrix| m.as_slice().iter().sum::<f64>() / m.as_slice().len() as f64;
    let ratio = mean_se(&small.stderr) / mean_se(&mc.stderr);
    let cpu = thread_cpu() - start;
    let pass = max_z < 5.0 && (ratio - 2.0).abs() <= 0.4 && cpu < Duration::from_secs(120);
    report(
        5,
        "expected logits",
        pass,
        &format!("max |z| {max_z:.2} (< 5), se ratio 5k/20k {ratio:.3} (2 +- 20%), cpu {cpu:.2?} (< 2 min)"),
    );
    assert!(pass);
}

#[test]
fn c06_gradients() {
    let arch = ModelArch::tiny();
    let mut worst = (0.0, String::new());
    let mut combos = 0;
    for variant in Variant::ALL {
        for skip in SkipMode::ALL {
            let r = grad_check_config(&arch, &InitSpec::vision(), variant, skip, 6, 1e-5).unwrap();
            combos += 1;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{}/{} in {}", variant.as_str(), skip.as_str(), r.worst));
            }
        }
    }
    let pass = worst.0 < 1e-4;
    report(6, "gradients", pass, &format!("{combos} combinations, max rel err {:.3e} (< 1e-4) at {}", worst.0, worst.1));
    assert!(pass);
}

#[test]
fn c07_inspector() {
    let arch = ModelArch::vit_tiny_cifar();
    let mimetic = product_analysis(&init_transformer(&arch, &InitSpec::vision(), 7, InitScope::Attention).unwrap()).unwrap();
    let vision = mimetic.layers.iter().all(|l| {
        l.sign_pattern == SignPattern::VisionLike && l.vp.diag_z_score < -5.0 && l.heads.iter().all(|h| h.qk.diag_z_score > 5.0)
    });

    let (mut quiet, mut total) = (0, 0);
    for seed in 0..20 {
        let ckpt = init_transformer(&arch, &InitSpec::baseline(), seed, InitScope::Attention).unwrap();
        for l in product_analysis(&ckpt).unwrap().layers {
            total += 1;
            if l.vp.diag_z_score.abs() < 2.0 && l.heads.iter().all(|h| h.qk.diag_z_score.abs() < 2.0) {
                quiet += 1;
            }
        }
    }
    let frac = quiet as f64 / total as f64;
    let pass = vision && frac >= 0.95;
    report(
        7,
        "inspector discrimination",
        pass,
        &format!(
            "mimetic vision_like on {}/{} layers; default |z| < 2 on {quiet}/{total} layers ({:.1}% >= 95%)",
            mimetic.count(SignPattern::VisionLike),
            mimetic.depth,
            100.0 * frac
        ),
    );
    assert!(pass);
}

#[test]
fn c08_training_benefit() {
    let start = thread_cpu();
    let steps = 800;
    let final_loss = |mode, seed| train_toy(&TrainConfig::toy(mode, seed, steps)).unwrap().final_test_loss;
    let (mut default, mut negative, mut positive) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..10 {
        default.push(final_loss(InitMode::Default, seed));
        negative.push(final_loss(InitMode::Mimetic, seed));
        positive.push(final_loss(InitMode::MimeticPositiveVp, seed));
        writeln!(
            std::io::stdout().lock(),
            "  seed {seed}: default {:.4}, mimetic {:.4}, positive vp {:.4}",
            default[seed as usize], negative[seed as usize], positive[seed as usize]
        )
        .expect("stdout is writable");
    }
    let cpu = thread_cpu() - start;
    let wins = negative.iter().zip(&default).filter(|(m, d)| m < d).count();
    let (med_neg, med_pos) = (median(&negative), median(&positive));
    let pass = wins >= 7 && med_pos > med_neg && cpu < Duration::from_secs(3600);
    report(
        8,
        "training benefit",
        pass,
        &format!(
            "mimetic beats default on {wins}/10 seeds (>= 7); median loss positive vp {med_pos:.4} vs negative {med_neg:.4} (must be higher); cpu {:.1} min (< 60)",
            cpu.as_secs_f64() / 60.0
        ),
    );
    assert!(pass);
}

#[test]
fn c09_diagonal_mass() {
    let arch = ModelArch::vit_tiny_cifar();
    let n = arch.total_tokens();
    let k = arch.head_dim();
    let layer_one_mass = |ckpt: &Checkpoint, x: &Matrix| {
        let layer = &load_attention(ckpt).unwrap()[0];
        let masses: Vec<f64> = layer
            .heads
            .iter()
            .map(|h| diagonal_mass(&attention_map(x, h, k).unwrap()))
            .collect();
        masses.iter().sum::<f64>() / masses.len() as f64
    };
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..10 {
        let pe = posembed::sinusoidal(arch.n_tokens, arch.d, 2.0, arch.class_token).unwrap();
        let mut rng = Rng::seed_from_u64(hash64(9, seed, 0));
        let x = gaussian_matrix(n, arch.d, 1.0, &mut rng).add(&pe.p);
        let mim = init_transformer(&arch, &InitSpec::vision(), seed, InitScope::Attention).unwrap();
        let def = init_transformer(&arch, &InitSpec::baseline(), seed, InitScope::Attention).unwrap();
        let (m, b) = (layer_one_mass(&mim, &x), layer_one_mass(&def, &x));
        if m > b {
            wins += 1;
        }
        gaps.push(m - b);
    }
    let pass = wins == 10;
    let smallest = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    report(9, "diagonal-mass ordering", pass, &format!("mimetic higher on {wins}/10 seeds (10 required), smallest gap {smallest:.4}"));
    assert!(pass);
}

#[test]
fn c10_container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut empty_arch = ModelArch::tiny();
    empty_arch.depth = 0;
    let checkpoints = [
        Checkpoint::new(),
        init_transformer(&empty_arch, &InitSpec::vision(), 0, InitScope::Attention).unwrap(),
        init_transformer(&ModelArch::tiny(), &InitSpec::vision(), 1, InitScope::Full).unwrap(),
        init_transformer(&ModelArch::language(), &InitSpec::language(), 2, InitScope::Attention).unwrap(),
        init_transformer(&ModelArch::vit_tiny_cifar(), &InitSpec::baseline(), 3, InitScope::Full).unwrap(),
    ];
    let mut identical = 0;
    for (i, c) in checkpoints.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.mim"));
        c.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        if back.bitwise_eq(c) && back.to_bytes() == c.to_bytes() {
            identical += 1;
        }
    }
    let pass = identical == checkpoints.len();
    report(10, "container round trip", pass, &format!("{identical}/{} bitwise identical, including two depth-0", checkpoints.len()));
    assert!(pass);
}
