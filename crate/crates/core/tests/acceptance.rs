//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.

// Oracles index explicitly to mirror the textbook formulas.
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::HashSet;
use std::time::{Duration, Instant};

use illusion_core::arrangements::{
    backward_all, derive_all, ArrangementExpr, IllusionSpec, Squash,
};
use illusion_core::evaluation::{
    build_prompt_groups, independence_from_kernel, vendi_score, PromptProtocol, STYLES,
    SUBJECT_TOKEN, VOC_SUBJECTS,
};
use illusion_core::fabrication::simulate_view;
use illusion_core::guidance::{add_noise, AnalyticOracleBackend, GuidanceBackend};
use illusion_core::losses::{dream_target_loss, dream_target_loss_grad, ssim, TimestepWeighting};
use illusion_core::optimizer::{resume, OptimizerKind, RunState, ScheduleConfig, Trainer};
use illusion_core::parametric_image::{FfnConfig, ParametricImage};
use illusion_core::targets::TargetSpec;
use illusion_core::RgbImage;
use qrcode::{EcLevel, QrCode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    check(
        t < limit,
        format!(
            "took {:.1}s, limit {:.0}s",
            t.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize, lo: f64, hi: f64) -> RgbImage {
    RgbImage::from_fn(h, w, |_, _, _| rng.random_range(lo..hi))
}

fn texts(n: usize) -> Vec<TargetSpec> {
    (0..n)
        .map(|i| TargetSpec::text(format!("prompt {i}")))
        .collect()
}

fn all_kinds() -> Vec<IllusionSpec> {
    vec![
        IllusionSpec::flip(texts(2)).unwrap(),
        IllusionSpec::rotation_overlay(texts(4)).unwrap(),
        IllusionSpec::hidden_overlay(texts(5)).unwrap(),
    ]
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn dot(a: &RgbImage, b: &RgbImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

const FD_STEP: f64 = 1e-5;

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let cfg = FfnConfig {
        num_features: 64,
        hidden_widths: vec![64, 64],
        ..FfnConfig::default()
    };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // FFN render: a random linear functional of the image, sampled parameters.
        let mut net = ParametricImage::ffn((8, 8), seed, cfg.clone()).map_err(|e| e.to_string())?;
        let probe = random_image(&mut rng, 8, 8, -1.0, 1.0);
        let grads = net.backward(&probe);
        let (mut a, mut f) = (Vec::new(), Vec::new());
        for _ in 0..40 {
            let t = rng.random_range(0..grads.len());
            let i = rng.random_range(0..grads[t].len());
            let orig = net.parameters()[t].data[i];
            net.parameters_mut()[t].data[i] = orig + FD_STEP;
            let up = dot(&probe, &net.render());
            net.parameters_mut()[t].data[i] = orig - FD_STEP;
            let down = dot(&probe, &net.render());
            net.parameters_mut()[t].data[i] = orig;
            a.push(grads[t][i]);
            f.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&a, &f));

        // Arrangements: all prime pixels against a random functional of all derived images.
        for spec in all_kinds() {
            let mut primes: Vec<RgbImage> = (0..spec.n)
                .map(|_| random_image(&mut rng, 8, 8, 0.05, 0.95))
                .collect();
            let probes: Vec<RgbImage> = (0..spec.m)
                .map(|_| random_image(&mut rng, 8, 8, -1.0, 1.0))
                .collect();
            let objective = |p: &[RgbImage]| -> f64 {
                derive_all(&spec, p)
                    .unwrap()
                    .iter()
                    .zip(&probes)
                    .map(|(d, r)| dot(d, r))
                    .sum()
            };
            let analytic = backward_all(&spec, &primes, &probes).map_err(|e| e.to_string())?;
            let (mut a, mut f) = (Vec::new(), Vec::new());
            for i in 0..spec.n {
                for k in 0..primes[i].len() {
                    let orig = primes[i].data()[k];
                    primes[i].data_mut()[k] = orig + FD_STEP;
                    let up = objective(&primes);
                    primes[i].data_mut()[k] = orig - FD_STEP;
                    let down = objective(&primes);
                    primes[i].data_mut()[k] = orig;
                    a.push(analytic[i].data()[k]);
                    f.push((up - down) / (2.0 * FD_STEP));
                }
            }
            worst = worst.max(rel_err(&a, &f));
        }

        // Dream-target loss with respect to the derived image.
        let target = random_image(&mut rng, 8, 8, 0.0, 1.0);
        let mut d = random_image(&mut rng, 8, 8, 0.0, 1.0);
        let (_, g) = dream_target_loss_grad(&target, &d).map_err(|e| e.to_string())?;
        let mut f = Vec::new();
        for k in 0..d.len() {
            let orig = d.data()[k];
            d.data_mut()[k] = orig + FD_STEP;
            let up = dream_target_loss(&target, &d).unwrap();
            d.data_mut()[k] = orig - FD_STEP;
            let down = dream_target_loss(&target, &d).unwrap();
            d.data_mut()[k] = orig;
            f.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(g.data(), &f));
    }
    check(worst < 1e-3, format!("worst relative error {worst:.3e}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("worst relative error {worst:.2e} over 20 seeds"))
}

fn arrangement_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kinds = all_kinds();
    let mut worst_mono: f64 = 0.0;
    for case in 0..200 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let img = random_image(&mut rng, h, w, 0.0, 1.0);
        check(
            img.rot90(1).rot90(1).rot90(1).rot90(1) == img,
            format!("rot90^4 case {case}"),
        )?;
        check(
            img.rot180().rot180() == img,
            format!("rot180^2 case {case}"),
        )?;

        let s = rng.random_range(1..9);
        let factors: Vec<RgbImage> = (0..4)
            .map(|_| random_image(&mut rng, s, s, 0.0, 1.0))
            .collect();
        let turns: Vec<u32> = (0..4).map(|_| rng.random_range(0..4)).collect();
        let exprs = |order: &[usize]| {
            ArrangementExpr::overlay(
                order
                    .iter()
                    .map(|&i| ArrangementExpr::prime(i).rotate(turns[i]))
                    .collect(),
                Squash::Tanh,
            )
        };
        let mut order = vec![0, 1, 2, 3];
        for i in (1..4).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        check(
            exprs(&[0, 1, 2, 3]).eval(&factors, 3.0) == exprs(&order).eval(&factors, 3.0),
            format!("overlay permutation {order:?} case {case}"),
        )?;

        for spec in &kinds {
            let mut primes: Vec<RgbImage> = (0..spec.n)
                .map(|_| random_image(&mut rng, s, s, 0.0, 1.0))
                .collect();
            // Include the closed interval ends.
            primes[0].data_mut()[0] = 0.0;
            primes[spec.n - 1].data_mut()[0] = 1.0;
            let before = derive_all(spec, &primes).map_err(|e| e.to_string())?;
            for d in &before {
                let (lo, hi) = d.min_max();
                check(
                    lo >= 0.0 && hi <= 1.0,
                    format!("{:?} range [{lo}, {hi}] case {case}", spec.kind),
                )?;
            }
            let i = rng.random_range(0..spec.n);
            let k = rng.random_range(0..primes[i].len());
            let v = primes[i].data()[k];
            primes[i].data_mut()[k] = v + rng.random_range(0.0..1.0) * (1.0 - v);
            let after = derive_all(spec, &primes).map_err(|e| e.to_string())?;
            for (b, a) in before.iter().zip(&after) {
                for (x, y) in b.data().iter().zip(a.data()) {
                    worst_mono = worst_mono.max(x - y);
                }
            }
        }
    }
    check(
        worst_mono <= 1e-12,
        format!("monotonicity violated by {worst_mono:e}"),
    )?;
    Ok("200 cases: rotations exact, overlay order exact, range closed, monotone".into())
}

fn oracle_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random_image(&mut rng, 16, 16, 0.0, 1.0);
    let oracle = AnalyticOracleBackend::new(x0.clone());
    let emb = oracle.embed_text("anything").map_err(|e| e.to_string())?;
    let clean = oracle.encode(&x0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for tau in 1..=oracle.max_timestep() {
        let eps = clean.standard_normal_like(&mut rng);
        let noised = add_noise(oracle.schedule(), &clean, tau, &eps).map_err(|e| e.to_string())?;
        let pred = oracle
            .predict_noise(&noised, tau, &emb)
            .map_err(|e| e.to_string())?;
        let err = pred
            .data
            .iter()
            .zip(&eps.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    check(oracle.max_timestep() == 1000, "schedule is not 1000 steps")?;
    check(worst < 1e-6, format!("max error {worst:e}"))?;
    Ok(format!(
        "max |eps_hat - eps| = {worst:.2e} over 1000 timesteps"
    ))
}

fn score_distillation_convergence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = random_image(&mut rng, 32, 32, 0.1, 0.9);
    let oracle = AnalyticOracleBackend::new(target.clone());
    let spec = IllusionSpec::custom(
        1,
        vec![ArrangementExpr::prime(0)],
        None,
        vec![TargetSpec::text("target")],
    )
    .map_err(|e| e.to_string())?;
    let schedule = ScheduleConfig {
        phase1_steps: 2000,
        phase2_strengths: vec![],
        learning_rate: 1.0,
        optimizer: OptimizerKind::Sgd,
        sd_weighting: TimestepWeighting::SqrtOneMinusAlphaBar,
        seed: 5,
        ..ScheduleConfig::default()
    };
    let mut trainer = Trainer::new(&spec, &oracle, &schedule).map_err(|e| e.to_string())?;
    let mut state = trainer
        .init_state(vec![
            ParametricImage::raw((32, 32), 2).map_err(|e| e.to_string())?
        ])
        .map_err(|e| e.to_string())?;
    let distance = |s: &RunState| s.primes[0].render().l2_distance(&target);
    let mut dists = vec![distance(&state)];
    for _ in 0..40 {
        trainer
            .run_steps(&mut state, 50)
            .map_err(|e| e.to_string())?;
        dists.push(distance(&state));
    }
    check(state.step == 2000, format!("ran {} steps", state.step))?;
    if let Some(w) = dists.windows(2).position(|w| w[1] >= w[0]) {
        return Err(format!(
            "distance rose in window {w}: {} -> {}",
            dists[w],
            dists[w + 1]
        ));
    }
    let mse = dists[40].powi(2) / target.len() as f64;
    check(mse < 0.01, format!("final mse {mse:e}"))?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "distance {:.3} -> {:.2e}, final mse {mse:.2e}",
        dists[0], dists[40]
    ))
}

const QR_SIZE: usize = 128;
const QR_PAYLOAD: &str = "https://example.org/hidden-overlay";

fn qr_target() -> RgbImage {
    let code = QrCode::with_error_correction_level(QR_PAYLOAD, EcLevel::M).unwrap();
    let w = code.width();
    let module = QR_SIZE / (w + 8);
    let off = (QR_SIZE - w * module) / 2;
    let colors = code.to_colors();
    RgbImage::from_fn(QR_SIZE, QR_SIZE, |r, c, _| {
        let inside = (off..off + w * module).contains(&r) && (off..off + w * module).contains(&c);
        if inside && colors[(r - off) / module * w + (c - off) / module] == qrcode::Color::Dark {
            0.0
        } else {
            1.0
        }
    })
}

/// Light textured images; overlays darken, so the visible layers stay bright.
fn texture_target(k: usize) -> RgbImage {
    let n = QR_SIZE as f64;
    RgbImage::from_fn(QR_SIZE, QR_SIZE, |r, c, ch| {
        let (x, y) = (c as f64 / n, r as f64 / n);
        let v = match k {
            0 => (x * 20.0).sin(),
            1 => ((x + y) * 14.0 + ch as f64).sin(),
            2 => (((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt() * 25.0).sin(),
            _ => (x * 12.0).sin() * (y * 12.0).cos(),
        };
        0.83 + 0.15 * v
    })
}

fn decode_qr(img: &RgbImage) -> Option<String> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let gray = image::GrayImage::from_fn(w, h, |x, y| {
        let v = (0..3)
            .map(|ch| img.get(y as usize, x as usize, ch))
            .sum::<f64>()
            / 3.0;
        image::Luma([if v < 0.5 { 0 } else { 255 }])
    });
    let mut prepared = rqrr::PreparedImage::prepare(gray);
    prepared
        .detect_grids()
        .first()
        .and_then(|g| g.decode().ok())
        .map(|(_, s)| s)
}

fn hidden_overlay_end_to_end() -> Outcome {
    let start = Instant::now();
    let qr = qr_target();
    check(
        decode_qr(&qr).as_deref() == Some(QR_PAYLOAD),
        "reference QR does not decode",
    )?;
    let mut targets: Vec<TargetSpec> = (0..4)
        .map(|k| TargetSpec::static_image(texture_target(k)))
        .collect();
    targets.push(TargetSpec::static_image(qr));
    let spec = IllusionSpec::hidden_overlay(targets).map_err(|e| e.to_string())?;
    check(
        spec.weights == [1.0, 1.0, 1.0, 1.0, 3.0] && spec.brightness() == 3.0,
        "unexpected defaults",
    )?;
    // Image targets never refresh, so the single strength only marks the segment.
    let oracle = AnalyticOracleBackend::new(RgbImage::filled(QR_SIZE, QR_SIZE, 0.5));
    let schedule = ScheduleConfig {
        phase1_steps: 0,
        phase2_strengths: vec![0.5],
        steps_per_target: 2000,
        learning_rate: 0.05,
        optimizer: OptimizerKind::Adam,
        ..ScheduleConfig::default()
    };
    let mut trainer = Trainer::new(&spec, &oracle, &schedule).map_err(|e| e.to_string())?;
    let primes = (0..4)
        .map(|i| ParametricImage::raw((QR_SIZE, QR_SIZE), i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let mut state = trainer.init_state(primes).map_err(|e| e.to_string())?;
    trainer.run_phase2(&mut state).map_err(|e| e.to_string())?;
    check(state.step == 2000, format!("ran {} steps", state.step))?;
    let derived = trainer.derived(&state).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = (0..4)
        .map(|j| ssim(&derived[j], &texture_target(j)).unwrap())
        .collect();
    let shown: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
    check(
        scores.iter().all(|s| *s >= 0.7),
        format!("ssim [{}]", shown.join(", ")),
    )?;
    let decoded = decode_qr(&derived[4]);
    check(
        decoded.as_deref() == Some(QR_PAYLOAD),
        format!("hidden image decoded as {decoded:?}"),
    )?;
    within(Duration::from_secs(15 * 60), start)?;
    Ok(format!(
        "ssim [{}], QR decoded, {:.0}s",
        shown.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

fn brute_force_independence(k: &[Vec<f64>], tau: f64) -> f64 {
    let m = k.len();
    let mut out = f64::INFINITY;
    for i in 0..m {
        let mut col = 0.0;
        let mut row = 0.0;
        for r in 0..m {
            col += (k[r][i] / tau).exp();
        }
        for c in 0..m {
            row += (k[i][c] / tau).exp();
        }
        let num = (k[i][i] / tau).exp();
        out = out.min(num / col).min(num / row);
    }
    out
}

fn independence_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(2..=6);
        let k: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let got = independence_from_kernel(&k, 0.05).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_force_independence(&k, 0.05)).abs());
    }
    check(worst < 1e-6, format!("max diff {worst:e}"))?;
    for m in 2..=6 {
        let c = vec![vec![0.37; m]; m];
        let s = independence_from_kernel(&c, 0.05).map_err(|e| e.to_string())?;
        check(
            (s - 1.0 / m as f64).abs() < 1e-12,
            format!("constant K, m={m}: {s}"),
        )?;
    }
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let s = independence_from_kernel(&eye, 0.05).map_err(|e| e.to_string())?;
    check(s > 0.999, format!("identity K gives {s}"))?;
    Ok(format!(
        "max diff {worst:.1e} over 100 kernels; constant = 1/m; identity = {s:.9}"
    ))
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn reference_vendi(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let unit: Vec<Vec<f64>> = x
        .iter()
        .map(|v| {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / norm).collect()
        })
        .collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    unit[i]
                        .iter()
                        .zip(&unit[j])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n as f64
                })
                .collect()
        })
        .collect();
    let h: f64 = jacobi_eigenvalues(k)
        .into_iter()
        .filter(|l| *l > 0.0)
        .map(|l| -l * l.ln())
        .sum();
    h.exp()
}

fn vendi_bounds_and_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let dim = rng.random_range(2..=12);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let v = vendi_score(&x).map_err(|e| e.to_string())?;
        check(
            (1.0..=n as f64).contains(&v),
            format!("vendi {v} outside [1, {n}]"),
        )?;
        worst = worst.max((v - reference_vendi(&x)).abs());
    }
    check(worst < 1e-6, format!("max diff vs Jacobi {worst:e}"))?;
    for n in 1..=8 {
        let base: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let same = vec![base; n];
        let v = vendi_score(&same).map_err(|e| e.to_string())?;
        check((v - 1.0).abs() < 1e-9, format!("identical n={n}: {v}"))?;
        let ortho: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            rng.random_range(0.5..2.0)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let v = vendi_score(&ortho).map_err(|e| e.to_string())?;
        check(
            (v - n as f64).abs() < 1e-9,
            format!("orthogonal n={n}: {v}"),
        )?;
    }
    Ok(format!(
        "bounds hold; max diff vs Jacobi {worst:.1e}; closed forms within 1e-9"
    ))
}

fn resume_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let target_a = random_image(&mut rng, 8, 8, 0.0, 1.0);
    let target_b = random_image(&mut rng, 8, 8, 0.0, 1.0);
    let oracle = AnalyticOracleBackend::new(target_a)
        .with_prompt("b", target_b.clone())
        .map_err(|e| e.to_string())?;
    let spec = IllusionSpec::flip(vec![
        TargetSpec::text("a"),
        TargetSpec::static_image(target_b),
    ])
    .map_err(|e| e.to_string())?;
    let schedule = ScheduleConfig {
        phase1_steps: 6,
        phase2_strengths: vec![0.7, 0.4, 0.1],
        steps_per_target: 4,
        learning_rate: 0.01,
        seed: 31,
        img2img: illusion_core::guidance::Img2ImgConfig {
            inference_steps: 10,
        },
        ..ScheduleConfig::default()
    };
    let cfg = FfnConfig {
        num_features: 16,
        hidden_widths: vec![16, 16],
        ..FfnConfig::default()
    };
    let prime = ParametricImage::ffn((8, 8), 37, cfg).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&spec, &oracle, &schedule).map_err(|e| e.to_string())?;
    let mut reference = trainer
        .init_state(vec![prime.clone()])
        .map_err(|e| e.to_string())?;
    trainer.run(&mut reference).map_err(|e| e.to_string())?;
    let total = schedule.total_steps();
    check(
        reference.step == total,
        format!("reference ran {} of {total} steps", reference.step),
    )?;
    let bits = |s: &RunState| -> Vec<u64> {
        s.primes
            .iter()
            .flat_map(|p| {
                p.parameters()
                    .into_iter()
                    .flat_map(|t| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
            .collect()
    };

    for cut in 1..total {
        let path = dir.path().join(format!("cut{cut}.json"));
        {
            let mut t = Trainer::new(&spec, &oracle, &schedule).map_err(|e| e.to_string())?;
            let mut s = t
                .init_state(vec![prime.clone()])
                .map_err(|e| e.to_string())?;
            t.run_steps(&mut s, cut).map_err(|e| e.to_string())?;
            s.save(&path).map_err(|e| e.to_string())?;
        }
        let mut t = Trainer::new(&spec, &oracle, &schedule).map_err(|e| e.to_string())?;
        let mut s = resume(&path).map_err(|e| e.to_string())?;
        t.run(&mut s).map_err(|e| e.to_string())?;
        check(
            bits(&s) == bits(&reference),
            format!("parameters differ after resuming at step {cut}"),
        )?;
        check(
            s == reference,
            format!("run state differs after resuming at step {cut}"),
        )?;
    }
    Ok(format!(
        "bitwise identical for every interruption point 1..{total}"
    ))
}

fn realizability() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let oracle = AnalyticOracleBackend::new(RgbImage::filled(8, 8, 0.5));
    let schedule = ScheduleConfig::default();
    let mut cases = 0;
    for spec in all_kinds() {
        let trainer = Trainer::new(&spec, &oracle, &schedule).map_err(|e| e.to_string())?;
        for seed in 0..10 {
            let primes = (0..spec.n)
                .map(|i| ParametricImage::raw((8, 8), seed * 10 + i as u64))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let mut state = trainer.init_state(primes).map_err(|e| e.to_string())?;
            // Perturb away from the initialization too.
            for p in &mut state.primes {
                for t in p.parameters_mut() {
                    for v in &mut t.data {
                        *v += rng.random_range(-3.0..3.0);
                    }
                }
            }
            let optimized = trainer.derived(&state).map_err(|e| e.to_string())?;
            let rendered = state.render_primes();
            for (j, d) in optimized.iter().enumerate() {
                let v = simulate_view(&spec, &rendered, j, spec.brightness())
                    .map_err(|e| e.to_string())?;
                check(&v == d, format!("{:?} view {j} differs", spec.kind))?;
                cases += 1;
            }
        }
    }
    Ok(format!(
        "{cases} simulated views bitwise equal to derived images"
    ))
}

fn prompt_protocol() -> Outcome {
    let protocol = PromptProtocol {
        seed: 43,
        ..PromptProtocol::default()
    };
    check(
        protocol.subjects.len() == 19 && protocol.styles.len() == 4,
        "default protocol sizes",
    )?;
    check(
        protocol
            .subjects
            .iter()
            .map(String::as_str)
            .eq(VOC_SUBJECTS),
        "subjects differ",
    )?;
    check(
        protocol.styles.iter().map(String::as_str).eq(STYLES),
        "styles differ",
    )?;
    let groups = build_prompt_groups(&protocol).map_err(|e| e.to_string())?;
    check(groups.len() == 64 * 4, format!("{} groups", groups.len()))?;
    for g in &groups {
        let unique: HashSet<&String> = g.subjects.iter().collect();
        check(
            g.subjects.len() == 5 && unique.len() == 5,
            format!("group subjects {:?}", g.subjects),
        )?;
        let style = &protocol.styles[g.style_index];
        for (s, p) in g.subjects.iter().zip(&g.prompts) {
            check(
                *p == style.replace(SUBJECT_TOKEN, s),
                format!("prompt {p:?}"),
            )?;
        }
    }
    for (s, style) in protocol.styles.iter().enumerate() {
        let n = groups.iter().filter(|g| g.style_index == s).count();
        check(n == 64, format!("style {style:?} has {n} groups"))?;
    }
    check(
        build_prompt_groups(&protocol).map_err(|e| e.to_string())? == groups,
        "same seed differs",
    )?;
    let other = PromptProtocol {
        seed: 44,
        ..protocol.clone()
    };
    check(
        build_prompt_groups(&other).map_err(|e| e.to_string())? != groups,
        "seed has no effect",
    )?;
    Ok("256 groups of 5 unique subjects; seeded reproducibility exact".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("arrangement algebra", arrangement_algebra),
        ("analytic oracle exactness", oracle_exactness),
        (
            "score-distillation convergence",
            score_distillation_convergence,
        ),
        ("hidden overlay end to end", hidden_overlay_end_to_end),
        ("independence score oracle", independence_oracle),
        ("vendi bounds and oracle", vendi_bounds_and_oracle),
        ("resume determinism", resume_determinism),
        ("realizability consistency", realizability),
        ("prompt protocol", prompt_protocol),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]",
                i + 1
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "criterion {:>2} {name}: FAIL ({detail}) [{secs:.1}s]",
                    i + 1
                );
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
