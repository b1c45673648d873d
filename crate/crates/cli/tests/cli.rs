#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use illusion_core::evaluation::{cosine_similarity, Embedder, MetricsReport, MockEmbedder};
use illusion_core::RgbImage;
use qrcode::{EcLevel, QrCode};

const BIN: &str = env!("CARGO_BIN_EXE_illusion");

fn illusion(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn save(img: &RgbImage, path: PathBuf) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save_png(path).unwrap();
}

fn halves(size: usize, vertical: bool) -> RgbImage {
    RgbImage::from_fn(size, size, |r, c, ch| {
        let on = if vertical { c < size / 2 } else { r < size / 2 };
        if on {
            0.9 - 0.2 * ch as f64
        } else {
            0.1
        }
    })
}

const FLIP: &str = r#"
preset = "flip"
seed = 7

[illusion]
targets = [{kind = "image", path = "a.png"}, {kind = "image", path = "b.png"}]

[prime]
kind = "raw"
resolution = 64

[schedule]
phase1_steps = 0
phase2_strengths = [0.5]
steps_per_target = 40
learning_rate = 0.05
"#;

fn flip_fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save(&halves(64, false), dir.path().join("a.png"));
    save(&halves(64, true), dir.path().join("b.png"));
    std::fs::write(dir.path().join("flip.toml"), FLIP).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn minimal_flip_run_writes_layout() {
    let dir = flip_fixture();
    let o = illusion(&["run", "flip.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(files(&out.join("primes")), ["prime_0.png"]);
    assert_eq!(files(&out.join("derived")), ["d0.png", "d1.png"]);
    for f in ["trace.jsonl", "checkpoint.json", "spec.json", "index.html", "config.resolved.toml"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 40);
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["per_derived"].as_array().unwrap().len(), 2);

    let prime = RgbImage::load(out.join("primes/prime_0.png")).unwrap();
    assert_eq!(prime.shape(), (64, 64, 3));
    let d1 = RgbImage::load(out.join("derived/d1.png")).unwrap();
    assert!(d1.max_abs_diff(&prime.rot180()) < 1e-12);

    // The resolved config stands on its own.
    let resolved = out.join("config.resolved.toml");
    let o = illusion(&["validate", resolved.to_str().unwrap()], Path::new("/"));
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn identical_config_gives_identical_bytes() {
    let dir = flip_fixture();
    for out in ["r1", "r2"] {
        let o = illusion(&["run", "flip.toml", "--out-dir", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["primes/prime_0.png", "derived/d0.png", "derived/d1.png", "trace.jsonl"] {
        let a = std::fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn periodic_checkpoints_and_resume_leave_results_unchanged() {
    let dir = flip_fixture();
    let o = illusion(&["run", "flip.toml", "--out-dir", "plain"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let args = ["run", "flip.toml", "--out-dir", "ck", "--set", "checkpoint_every=15"];
    let o = illusion(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let o = illusion(&resumed, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["primes/prime_0.png", "checkpoint.json"] {
        let a = std::fs::read(dir.path().join("plain").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("ck").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn hidden_overlay_with_too_many_targets_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let targets: Vec<String> = (0..6)
        .map(|i| format!("{{kind = \"text\", prompt = \"p{i}\"}}"))
        .collect();
    let cfg = format!(
        "preset = \"hidden_overlay\"\n[illusion]\ntargets = [{}]\n",
        targets.join(", ")
    );
    std::fs::write(dir.path().join("bad.toml"), cfg).unwrap();
    let o = illusion(&["run", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("illusion."), "{err}");
    assert!(err.contains("m=5"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn validate_reports_every_problem() {
    let dir = flip_fixture();
    let o = illusion(
        &[
            "validate",
            "flip.toml",
            "--set",
            "illusion.weights=[1.0, 0.0]",
            "--set",
            "schedule.phase2_strengths=[0.3, 0.5]",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("illusion.weights[1]"), "{err}");
    assert!(err.contains("> 0"), "{err}");
    assert!(err.contains("schedule.phase2_strengths"), "{err}");

    let o = illusion(&["validate", "flip.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = flip_fixture();
    let o = illusion(&["validate", "flip.toml", "--set", "schedule.lr=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));
}

#[test]
fn unavailable_external_backend_exits_3() {
    let dir = flip_fixture();
    let o = illusion(
        &["run", "flip.toml", "--set", "backend={kind = \"external\"}"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn brute_force_independence(k: &[Vec<f64>], tau: f64) -> f64 {
    let m = k.len();
    let mut out = f64::INFINITY;
    for i in 0..m {
        let col: f64 = (0..m).map(|r| (k[r][i] / tau).exp()).sum();
        let row: f64 = (0..m).map(|c| (k[i][c] / tau).exp()).sum();
        let num = (k[i][i] / tau).exp();
        out = out.min(num / col).min(num / row);
    }
    out
}

#[test]
fn evaluate_single_group_matches_mock_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = ["a red cat", "a blue dog", "a green boat"];
    let images: Vec<RgbImage> = (0..3)
        .map(|j| {
            RgbImage::from_fn(32, 32, |r, c, ch| {
                ((r * (j + 1) + c * (ch + 2) + 5 * j) % 17) as f64 / 16.0
            })
        })
        .collect();
    for (j, img) in images.iter().enumerate() {
        save(img, dir.path().join(format!("groups/g0/d{j}.png")));
    }
    let manifest = serde_json::json!({
        "groups": [{"name": "g0", "prompts": prompts, "method": "C", "style": "photo"}]
    });
    std::fs::write(dir.path().join("prompts.json"), manifest.to_string()).unwrap();

    let o = illusion(&["evaluate", "."], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = MetricsReport::read_json(dir.path().join("report/metrics.json")).unwrap();

    // Same embedder as the CLI default, on the images as written to disk.
    let embedder = MockEmbedder::new(64, 0).unwrap();
    let k: Vec<Vec<f64>> = (0..3)
        .map(|r| {
            let img = RgbImage::load(dir.path().join(format!("groups/g0/d{r}.png"))).unwrap();
            let e = embedder.embed_image(&img).unwrap();
            (0..3)
                .map(|c| cosine_similarity(&e, &embedder.embed_text(prompts[c]).unwrap()).unwrap())
                .collect()
        })
        .collect();
    let expected = brute_force_independence(&k, 0.05);
    assert_eq!(report.groups.len(), 1);
    assert!((report.groups[0].independence - expected).abs() < 1e-12);
    for j in 0..3 {
        assert!((report.groups[0].controllability[j] - k[j][j]).abs() < 1e-12);
    }
    assert_eq!(report.aggregates.len(), 1);
    assert_eq!(report.aggregates[0].groups, 1);
    for f in ["metrics.csv", "independence.png", "controllability.png"] {
        assert!(dir.path().join("report").join(f).is_file(), "missing {f}");
    }

    // Report JSON round-trips.
    let path = dir.path().join("again.json");
    report.write_json(&path).unwrap();
    assert_eq!(MetricsReport::read_json(&path).unwrap(), report);
}

#[test]
fn evaluate_lists_missing_files_and_rejects_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = illusion(&["evaluate", "."], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("prompts.json"), "{}", stderr(&o));

    let manifest = serde_json::json!({
        "groups": [{"name": "g0", "prompts": ["a", "b"]}, {"name": "g1", "prompts": ["c", "d"]}]
    });
    std::fs::write(dir.path().join("prompts.json"), manifest.to_string()).unwrap();
    save(&halves(16, true), dir.path().join("groups/g0/d0.png"));
    let o = illusion(&["evaluate", "."], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for missing in ["groups[0].images[1]", "groups[1].images[0]", "groups[1].images[1]"] {
        assert!(err.contains(missing), "{err}");
    }
    assert!(!err.contains("groups[0].images[0]"), "{err}");
}

#[test]
fn export_writes_print_sheets() {
    let dir = flip_fixture();
    assert!(illusion(&["run", "flip.toml"], dir.path()).status.success());
    let o = illusion(
        &["export", "out", "--dpi", "300", "--size-mm", "25.4", "--crop-marks"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let print = dir.path().join("out/print");
    let page = image::open(print.join("prime_0.png")).unwrap();
    // 300 px image area plus a 5 mm margin (59 px) on each side.
    assert_eq!(page.width(), 300 + 2 * 59);
    let contact = image::open(print.join("contact_sheet.png")).unwrap();
    assert_eq!((contact.width(), contact.height()), (2 * 64 + 4, 64));
    assert!(print.join("print_manifest.json").is_file());
}

#[test]
fn prompts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["prompts", "--seed", "3", "--groups-per-style", "2"];
    let a = illusion(&args, dir.path());
    let b = illusion(&args, dir.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let groups: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(groups.as_array().unwrap().len(), 8);
}

const QR_PAYLOAD: &str = "HIDDEN";
const QR_SIZE: usize = 64;

fn qr_target() -> RgbImage {
    let code = QrCode::with_error_correction_level(QR_PAYLOAD, EcLevel::L).unwrap();
    let w = code.width();
    let module = QR_SIZE / (w + 8);
    let off = (QR_SIZE - w * module) / 2;
    let colors = code.to_colors();
    RgbImage::from_fn(QR_SIZE, QR_SIZE, |r, c, _| {
        let span = off..off + w * module;
        if span.contains(&r)
            && span.contains(&c)
            && colors[(r - off) / module * w + (c - off) / module] == qrcode::Color::Dark
        {
            0.0
        } else {
            1.0
        }
    })
}

fn decode_qr(img: &RgbImage) -> Option<String> {
    let gray = image::GrayImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let v = (0..3).map(|ch| img.get(y as usize, x as usize, ch)).sum::<f64>() / 3.0;
        image::Luma([if v < 0.5 { 0 } else { 255 }])
    });
    let mut prepared = rqrr::PreparedImage::prepare(gray);
    prepared
        .detect_grids()
        .first()
        .and_then(|g| g.decode().ok())
        .map(|(_, s)| s)
}

#[test]
fn hidden_overlay_qr_decodes() {
    let dir = tempfile::tempdir().unwrap();
    let qr = qr_target();
    assert_eq!(decode_qr(&qr).as_deref(), Some(QR_PAYLOAD));
    save(&qr, dir.path().join("qr.png"));
    for k in 0..4 {
        let img = RgbImage::from_fn(QR_SIZE, QR_SIZE, |r, c, _| {
            let v = match k {
                0 => (c as f64 * 0.3).sin(),
                1 => ((r + c) as f64 * 0.2).sin(),
                2 => (r as f64 * 0.25).cos(),
                _ => (c as f64 * 0.2).sin() * (r as f64 * 0.2).cos(),
            };
            0.83 + 0.15 * v
        });
        save(&img, dir.path().join(format!("t{k}.png")));
    }
    let cfg = r#"
preset = "hidden_overlay"
seed = 1

[illusion]
targets = [
  {kind = "image", path = "t0.png"},
  {kind = "image", path = "t1.png"},
  {kind = "image", path = "t2.png"},
  {kind = "image", path = "t3.png"},
  {kind = "image", path = "qr.png"},
]

[prime]
kind = "raw"
resolution = 64

[schedule]
phase1_steps = 0
phase2_strengths = [0.5]
steps_per_target = 400
learning_rate = 0.05
"#;
    std::fs::write(dir.path().join("hidden.toml"), cfg).unwrap();
    let o = illusion(&["run", "hidden.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert_eq!(files(&out.join("primes")).len(), 4);
    let d4 = RgbImage::load(out.join("derived/d4.png")).unwrap();
    assert_eq!(decode_qr(&d4).as_deref(), Some(QR_PAYLOAD));
}
