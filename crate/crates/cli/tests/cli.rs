use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dipuq_core::engines::PredictiveResult;
use dipuq_core::metrics::{psnr, squared_error_map};
use dipuq_core::noise::{load_image, make_phantom, save_image, BitDepth, Image, PhantomKind};
use tempfile::TempDir;

fn dipuq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dipuq"))
        .current_dir(dir)
        .env_remove("DIPUQ_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn write_phantom(dir: &Path, size: usize) -> PathBuf {
    let out = dipuq(dir, &["phantom", "--size", &size.to_string(), "--out", "gt.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("gt.png")
}

fn write_noisy(dir: &Path) {
    write_phantom(dir, 32);
    let out = dipuq(dir, &["corrupt", "gt.png", "--sigma", "0.1", "--out", "noisy.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_and_bad_flags_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&dipuq(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dipuq(tmp.path(), &["phantom", "--size", "abc"])), 2);
    assert_eq!(code(&dipuq(tmp.path(), &["phantom", "--kind", "nope"])), 2);
    assert_eq!(code(&dipuq(tmp.path(), &["phantom", "--size", "8"])), 2);
}

#[test]
fn missing_input_is_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let out = dipuq(tmp.path(), &["prepare", "absent.png"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.png"));
}

#[test]
fn phantom_writes_image_and_provenance() {
    let tmp = TempDir::new().unwrap();
    let gt = write_phantom(tmp.path(), 48);
    let img = load_image(&gt).unwrap();
    assert_eq!((img.width(), img.height()), (48, 48));
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("gt.png.prov.json")).unwrap())
            .unwrap();
    assert_eq!(prov["command"], "phantom");
    assert_eq!(prov["artifact"], "gt.png");
    assert_eq!(prov["seed"], 0);
    assert_eq!(prov["spec_sha256"].as_str().unwrap().len(), 64);
    assert!(prov["version"].as_str().unwrap().starts_with('v'));
}

#[test]
fn prepare_halves_dimensions() {
    let tmp = TempDir::new().unwrap();
    write_phantom(tmp.path(), 64);
    let out = dipuq(tmp.path(), &["prepare", "gt.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("64x64 -> 32x32"));
    let small = load_image(tmp.path().join("gt_gt.png")).unwrap();
    assert_eq!((small.width(), small.height()), (32, 32));
}

#[test]
fn prepare_rejects_odd_dimension_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = dipuq(tmp.path(), &["phantom", "--width", "33", "--height", "32", "--out", "odd.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = dipuq(tmp.path(), &["prepare", "odd.png"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("width 33"), "{}", stderr(&out));
}

#[test]
fn corrupt_gaussian_psnr_matches_noise_level() {
    let tmp = TempDir::new().unwrap();
    write_phantom(tmp.path(), 128);
    let out = dipuq(tmp.path(), &["corrupt", "gt.png", "--sigma", "0.1", "--no-clip", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reported: f64 = stdout(&out)
        .split("= ")
        .nth(1)
        .and_then(|s| s.split(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((reported - 20.0).abs() < 0.3, "psnr {reported}");
    let record: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("gt_noisy.noise.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(record["noise"]["seed"], 5);
    assert_eq!(record["noise"]["clip"], false);
    assert_eq!(record["source_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn corrupt_saved_file_keeps_noise_level_away_from_range_limits() {
    let tmp = TempDir::new().unwrap();
    let out = dipuq(tmp.path(), &["phantom", "--kind", "flat", "--size", "128", "--out", "flat.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = dipuq(tmp.path(), &["corrupt", "flat.png", "--sigma", "0.1", "--bits", "16"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let gt = load_image(tmp.path().join("flat.png")).unwrap();
    let noisy = load_image(tmp.path().join("flat_noisy.png")).unwrap();
    let p = psnr(&noisy, &gt, 1.0).unwrap();
    assert!((p - 20.0).abs() < 0.3, "psnr {p}");
}

#[test]
fn corrupt_zero_sigma_reproduces_input() {
    let tmp = TempDir::new().unwrap();
    write_phantom(tmp.path(), 32);
    let out = dipuq(tmp.path(), &["corrupt", "gt.png", "--sigma", "0", "--out", "same.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let gt = load_image(tmp.path().join("gt.png")).unwrap();
    let same = load_image(tmp.path().join("same.png")).unwrap();
    assert_eq!(gt, same);
}

#[test]
fn existing_outputs_need_force() {
    let tmp = TempDir::new().unwrap();
    write_phantom(tmp.path(), 32);
    let again = dipuq(tmp.path(), &["phantom", "--size", "32", "--out", "gt.png"]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    let forced = dipuq(tmp.path(), &["phantom", "--size", "32", "--out", "gt.png", "--force"]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn dip_denoise_writes_declared_manifest() {
    let tmp = TempDir::new().unwrap();
    write_noisy(tmp.path());
    let out = dipuq(
        tmp.path(),
        &["denoise", "noisy.png", "--method", "dip", "--iterations", "10", "--out", "run"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        listing(&tmp.path().join("run")),
        [
            "experiment.json",
            "experiment.json.prov.json",
            "seed_0",
            "summary.csv",
            "summary.csv.prov.json"
        ]
    );
    assert_eq!(
        listing(&tmp.path().join("run/seed_0")),
        [
            "checkpoint.bin",
            "checkpoint.bin.prov.json",
            "reconstruction.png",
            "reconstruction.png.prov.json",
            "trace.csv",
            "trace.csv.prov.json"
        ]
    );
    let exp: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("run/experiment.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(exp["noise"]["sigma"], 0.1);
    assert_eq!(exp["run"]["method"], "dip");
}

#[test]
fn mcdip_denoise_writes_uncertainty_and_calibration() {
    let tmp = TempDir::new().unwrap();
    write_noisy(tmp.path());
    let out = dipuq(
        tmp.path(),
        &[
            "denoise", "noisy.png", "--gt", "gt.png", "--method", "mcdip", "--iterations", "6",
            "--trace-every", "2", "--mc-samples", "25", "--out", "run",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let seed_dir = tmp.path().join("run/seed_0");
    let names = listing(&seed_dir);
    for f in [
        "uncertainty.png",
        "uncertainty.scale.txt",
        "calibration.csv",
        "predictive.json",
    ] {
        assert!(names.contains(&f.to_string()), "{f} missing from {names:?}");
        assert!(names.contains(&format!("{f}.prov.json")), "{f} provenance missing");
    }
    let csv = std::fs::read_to_string(seed_dir.join("calibration.csv")).unwrap();
    let counts: usize = csv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 32 * 32);
    let trace = std::fs::read_to_string(seed_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3);
}

#[test]
fn three_seed_summary_reports_mean_and_sample_std() {
    let tmp = TempDir::new().unwrap();
    write_noisy(tmp.path());
    let out = dipuq(
        tmp.path(),
        &[
            "denoise", "noisy.png", "--gt", "gt.png", "--method", "dip", "--iterations", "4",
            "--seeds", "3", "--seed", "7", "--out", "run",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let names = listing(&tmp.path().join("run"));
    for s in ["seed_7", "seed_8", "seed_9"] {
        assert!(names.contains(&s.to_string()));
    }
    let summary = std::fs::read_to_string(tmp.path().join("run/summary.csv")).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][3], "psnr_gt");
    let finals: Vec<f64> = rows[1..4].iter().map(|r| r[3].parse().unwrap()).collect();
    let mean = finals.iter().sum::<f64>() / 3.0;
    let std = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert_eq!(rows[4][1], "mean");
    assert_eq!(rows[4][2], "n=3");
    assert!((rows[4][3].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert_eq!(rows[5][1], "std");
    assert!((rows[5][3].parse::<f64>().unwrap() - std).abs() < 1e-12);
}

#[test]
fn deterministic_reruns_are_bit_identical() {
    let tmp = TempDir::new().unwrap();
    write_noisy(tmp.path());
    let run = |out: &str| {
        let o = dipuq(
            tmp.path(),
            &[
                "denoise", "noisy.png", "--gt", "gt.png", "--method", "mcdip", "--iterations",
                "5", "--mc-samples", "4", "--trace-every", "1", "--deterministic", "--out", out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("a");
    run("b");
    for f in [
        "trace.csv",
        "calibration.csv",
        "reconstruction.png",
        "uncertainty.png",
        "predictive.json",
        "trace.csv.prov.json",
    ] {
        let a = std::fs::read(tmp.path().join("a/seed_0").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b/seed_0").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    write_noisy(tmp.path());
    let run = |out: &str, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_dipuq"))
            .current_dir(tmp.path())
            .env("DIPUQ_THREADS", threads)
            .args([
                "denoise", "noisy.png", "--method", "mcdip", "--iterations", "3",
                "--mc-samples", "5", "--deterministic", "--out", out,
            ])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("one", "1");
    run("four", "4");
    for f in ["predictive.json", "trace.csv", "trace.csv.prov.json"] {
        let a = std::fs::read(tmp.path().join("one/seed_0").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("four/seed_0").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_dipuq"))
        .current_dir(tmp.path())
        .env("DIPUQ_THREADS", "zero")
        .args(["denoise", "noisy.png", "--iterations", "1", "--out", "bad"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn denoise_validation_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    write_noisy(tmp.path());
    for args in [
        vec!["denoise", "noisy.png", "--method", "nope", "--out", "x"],
        vec!["denoise", "noisy.png", "--iterations", "0", "--out", "x"],
        vec!["denoise", "noisy.png", "--seeds", "0", "--out", "x"],
        vec!["denoise", "--out", "x"],
    ] {
        let out = dipuq(tmp.path(), &args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
    }
    let out = dipuq(tmp.path(), &["denoise", "noisy.png", "--method", "nope"]);
    assert!(stderr(&out).contains("mcdip"), "{}", stderr(&out));
}

#[test]
fn config_file_drives_a_phantom_experiment() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("exp.json"),
        r#"{
            "phantom": {"kind": "layers", "size": 32, "seed": 2},
            "noise": {"sigma": 0.05, "seed": 3},
            "run": {"method": "dip", "iterations": 3, "trace_every": 1},
            "out": "from_config",
            "emit": {"checkpoint": false}
        }"#,
    )
    .unwrap();
    let out = dipuq(tmp.path(), &["denoise", "--config", "exp.json", "--iterations", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let seed_dir = tmp.path().join("from_config/seed_0");
    assert!(!seed_dir.join("checkpoint.bin").exists());
    let trace = std::fs::read_to_string(seed_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2);
    assert!(trace.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse::<f64>().is_ok());

    std::fs::write(tmp.path().join("bad.json"), r#"{"runn": {}}"#).unwrap();
    let out = dipuq(tmp.path(), &["denoise", "--config", "bad.json"]);
    assert_eq!(code(&out), 2);
}

fn calibrate_fixture(dir: &Path, inflate: f64) -> f64 {
    let gt_img = make_phantom(PhantomKind::Gradient, 32, 32, 0).unwrap();
    save_image(&gt_img, dir.join("gt.png"), BitDepth::Sixteen).unwrap();
    let gt = load_image(dir.join("gt.png")).unwrap();
    let mean = Image::new(
        32,
        32,
        gt.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.01 * ((i * 37 % 23) as f64 - 11.0) / 11.0)
            .collect(),
    )
    .unwrap();
    let err = squared_error_map(&mean, &gt).unwrap();
    let total = Image::new(32, 32, err.iter().map(|e| e * inflate).collect()).unwrap();
    let zeros = Image::filled(32, 32, 0.0).unwrap();
    let pred = PredictiveResult::from_parts(mean, total, zeros).unwrap();
    std::fs::create_dir_all(dir.join("recon")).unwrap();
    std::fs::write(
        dir.join("recon/predictive.json"),
        serde_json::to_string(&pred).unwrap(),
    )
    .unwrap();
    err.iter().sum::<f64>() / err.len() as f64
}

fn printed(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("{key} not printed in {out}"))
        .parse()
        .unwrap()
}

#[test]
fn calibrate_perfect_fixture_prints_zero_uce() {
    let tmp = TempDir::new().unwrap();
    calibrate_fixture(tmp.path(), 1.0);
    let out = dipuq(tmp.path(), &["calibrate", "recon", "gt.png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(printed(&stdout(&out), "UCE=").abs() < 1e-12);
    assert!(tmp.path().join("recon/calibration.csv.prov.json").exists());
}

#[test]
fn calibrate_inflated_fixture_prints_mean_error() {
    let tmp = TempDir::new().unwrap();
    let mean_err = calibrate_fixture(tmp.path(), 2.0);
    let out = dipuq(tmp.path(), &["calibrate", "recon", "gt.png", "--bins", "1", "--out", "cal"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!((printed(&text, "UCE=") - mean_err).abs() < 1e-12);
    assert!((printed(&text, "U=") - 2.0 * mean_err).abs() < 1e-12);
    assert!(tmp.path().join("cal/calibration.csv").exists());
}

#[test]
fn calibrate_lists_missing_artifacts() {
    let tmp = TempDir::new().unwrap();
    write_phantom(tmp.path(), 32);
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = dipuq(tmp.path(), &["calibrate", "empty", "gt.png"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("predictive.json"));
}

#[test]
fn gradcheck_lists_each_primitive_once() {
    let tmp = TempDir::new().unwrap();
    let out = dipuq(tmp.path(), &["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for name in dipuq_core::gradsuite::CHECKS {
        let hits = text
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(name))
            .count();
        assert_eq!(hits, 1, "{name}");
    }
}

#[test]
fn gradcheck_detects_perturbed_gradients() {
    let tmp = TempDir::new().unwrap();
    let out = dipuq(tmp.path(), &["gradcheck", "--perturb-analytic", "1.001"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));
}
