use std::path::{Path, PathBuf};

use dipuq_core::engines::{
    oracle_early_stop, stream, train_with, write_trace_csv, MethodRegistry, PredictiveResult,
    Stream, TraceKey, TrainedRun,
};
use dipuq_core::gradsuite::{run_suite, GRAD_TOLERANCE};
use dipuq_core::metrics::{
    calibration, format_value, psnr, save_uncertainty_map, scale_sidecar_path, squared_error_map,
    ssim, write_calibration_csv, CalibrationTable, SSIM_WINDOW,
};
use dipuq_core::netgen::save_checkpoint;
use dipuq_core::noise::{
    corrupt, downsample2x, load_image, make_phantom, save_image, BitDepth, Image, NoiseKind,
    NoiseSpec, PhantomKind,
};
use serde::{Deserialize, Serialize};

use crate::args::{
    Bits, CalibrateArgs, Common, CorruptArgs, DenoiseArgs, GradcheckArgs, PhantomArgs,
    PrepareArgs,
};
use crate::error::CliError;
use crate::output::{sha256_hex, spec_hash, Output};
use crate::spec::{resolve_run, ExperimentFile, ExperimentSpec, PhantomSpec};

pub const PREDICTIVE_FILE: &str = "predictive.json";

fn depth(bits: Bits) -> BitDepth {
    match bits {
        Bits::Eight => BitDepth::Eight,
        Bits::Sixteen => BitDepth::Sixteen,
    }
}

fn derived_path(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().unwrap_or_default().to_string_lossy();
    input.with_file_name(format!("{stem}_{suffix}.png"))
}

fn save(img: &Image, bits: Bits) -> impl FnOnce(&Path) -> Result<(), CliError> + '_ {
    move |p| Ok(save_image(img, p, depth(bits))?)
}

pub fn phantom(common: &Common, args: &PhantomArgs) -> Result<(), CliError> {
    let kind: PhantomKind = args.kind.parse()?;
    let (w, h) = (
        args.width.unwrap_or(args.size),
        args.height.unwrap_or(args.size),
    );
    let seed = common.seed.unwrap_or(0);
    let img = make_phantom(kind, h, w, seed)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("phantom.png"));
    let spec = PhantomSpec {
        kind,
        size: args.size,
        seed,
    };
    let writer = Output {
        force: common.force,
        command: "phantom",
        spec_hash: spec_hash(&(&spec, w, h))?,
    };
    writer.write(&out, seed, save(&img, args.bits))?;
    println!("wrote {} ({w}x{h})", out.display());
    Ok(())
}

pub fn prepare(common: &Common, args: &PrepareArgs) -> Result<(), CliError> {
    let img = load_image(&args.input)?;
    let small = downsample2x(&img)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| derived_path(&args.input, "gt"));
    let input_hash = sha256_hex(&std::fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?);
    let writer = Output {
        force: common.force,
        command: "prepare",
        spec_hash: spec_hash(&("prepare", input_hash))?,
    };
    writer.write(&out, 0, save(&small, args.bits))?;
    println!(
        "{}x{} -> {}x{}: {}",
        img.width(),
        img.height(),
        small.width(),
        small.height(),
        out.display()
    );
    Ok(())
}

/// Sidecar written next to a corrupted image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub source: PathBuf,
    pub source_sha256: String,
    pub noise: NoiseSpec,
}

pub fn corruption_sidecar(noisy: &Path) -> PathBuf {
    noisy.with_extension("noise.json")
}

pub fn corrupt_cmd(common: &Common, args: &CorruptArgs) -> Result<(), CliError> {
    let file = ExperimentFile::load(common.config.as_deref())?;
    let mut spec = file.noise_spec()?;
    if let Some(kind) = &args.kind {
        spec.kind = serde_json::from_value(serde_json::Value::String(kind.clone())).map_err(|_| {
            CliError::Usage(format!(
                "unknown noise kind `{kind}` (known: gaussian, poisson_approx)"
            ))
        })?;
    }
    if let Some(s) = args.sigma {
        spec.sigma = s;
    }
    if let Some(p) = args.peak {
        spec.peak = p;
    }
    if args.no_clip {
        spec.clip = false;
    }
    if let Some(seed) = common.seed.or(file.seed) {
        spec.seed = seed;
    }
    spec.validate()?;
    let gt = load_image(&args.input)?;
    let noisy = corrupt(&gt, &spec)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| derived_path(&args.input, "noisy"));
    let record = CorruptionRecord {
        source: args.input.clone(),
        source_sha256: sha256_hex(
            &std::fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?,
        ),
        noise: spec.clone(),
    };
    let writer = Output {
        force: common.force,
        command: "corrupt",
        spec_hash: spec_hash(&record)?,
    };
    let side = corruption_sidecar(&out);
    writer.claim(&side)?;
    writer.write(&out, spec.seed, save(&noisy, args.bits))?;
    writer.write_text(&side, spec.seed, &(serde_json::to_string_pretty(&record)? + "\n"))?;
    let label = match spec.kind {
        NoiseKind::Gaussian => format!("gaussian sigma={}", spec.sigma),
        NoiseKind::PoissonApprox => format!("poisson_approx peak={}", spec.peak),
    };
    println!(
        "{label}: PSNR(noisy, input) = {} dB -> {}",
        format_value(psnr(&noisy, &gt, 1.0)?),
        out.display()
    );
    Ok(())
}

/// One line of the multi-seed summary.
struct SeedOutcome {
    seed: u64,
    result: Result<SeedMetrics, String>,
}

struct SeedMetrics {
    psnr_gt: Option<f64>,
    ssim_gt: Option<f64>,
    best: Option<(usize, f64)>,
    u: Option<f64>,
    uce: Option<f64>,
}

pub fn denoise(common: &Common, args: &DenoiseArgs) -> Result<(), CliError> {
    let file = ExperimentFile::load(common.config.as_deref())?;
    let registry = MethodRegistry::default();
    let run = resolve_run(&file, common, args, &registry)?;
    let method = registry.get(&run.method)?;
    let seeds = common.seeds.or(file.seeds).unwrap_or(1);
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let bins = args.bins.or(file.bins).unwrap_or(dipuq_core::metrics::DEFAULT_BINS);
    if bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let emit = file.emit.clone().unwrap_or_default();

    let input = args.noisy.clone().or(file.input.clone());
    let gt_path = args.gt.clone().or(file.ground_truth.clone());
    let (noisy, gt, input_hash, noise) = match (&input, &file.phantom) {
        (Some(path), _) => {
            let noisy = load_image(path)?;
            let hash = sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?);
            let record = corruption_sidecar(path);
            let noise = if record.exists() {
                let text = std::fs::read_to_string(&record).map_err(|e| CliError::io(&record, e))?;
                let rec: CorruptionRecord = serde_json::from_str(&text)?;
                Some(rec.noise)
            } else {
                None
            };
            let gt = gt_path.as_ref().map(load_image).transpose()?;
            (noisy, gt, Some(hash), noise)
        }
        (None, Some(ph)) => {
            let gt = make_phantom(ph.kind, ph.size, ph.size, ph.seed)?;
            let spec = file.noise_spec()?;
            spec.validate()?;
            (corrupt(&gt, &spec)?, Some(gt), None, Some(spec))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "denoise needs a noisy image argument or a `phantom` entry in --config".into(),
            ))
        }
    };
    if let Some(gt) = &gt {
        if !gt.same_shape(&noisy) {
            return Err(CliError::Usage(format!(
                "ground truth is {}x{} but the noisy image is {}x{}",
                gt.width(),
                gt.height(),
                noisy.width(),
                noisy.height()
            )));
        }
    }

    let spec = ExperimentSpec {
        input: input.clone(),
        input_sha256: input_hash,
        ground_truth: gt_path.clone(),
        phantom: if input.is_none() { file.phantom.clone() } else { None },
        noise,
        run: dipuq_core::engines::RunConfig {
            threads: 1,
            ..run.clone()
        },
        seeds,
        bins,
        emit: emit.clone(),
    };
    let out_dir = common
        .out
        .clone()
        .or(file.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&run.method));
    let writer = Output {
        force: common.force,
        command: "denoise",
        spec_hash: spec_hash(&spec)?,
    };
    writer.write_text(
        &out_dir.join("experiment.json"),
        run.seed,
        &(serde_json::to_string_pretty(&spec)? + "\n"),
    )?;

    let mut outcomes = Vec::new();
    for i in 0..seeds {
        let seed = run.seed + i as u64;
        let cfg = dipuq_core::engines::RunConfig {
            seed,
            ..run.clone()
        };
        let dir = out_dir.join(format!("seed_{seed}"));
        eprintln!("[{}] seed {seed}: {} iterations", run.method, cfg.iterations);
        let result = run_seed(
            method.as_ref(),
            &cfg,
            &noisy,
            gt.as_ref(),
            &dir,
            &writer,
            &emit,
            bins,
            common.deterministic,
        );
        let result = match result {
            Ok(m) => Ok(m),
            Err(CliError::Usage(m)) => return Err(CliError::Usage(m)),
            Err(CliError::Runtime(m)) => {
                eprintln!("seed {seed} failed: {m}");
                let err_path = dir.join("error.txt");
                writer.write_text(&err_path, seed, &format!("{m}\n"))?;
                Err(m)
            }
        };
        outcomes.push(SeedOutcome { seed, result });
    }
    writer.write_text(&out_dir.join("summary.csv"), run.seed, &summary_csv(&run.method, &outcomes))?;
    let ok = outcomes.iter().filter(|o| o.result.is_ok()).count();
    println!("{ok}/{seeds} seeds succeeded; results in {}", out_dir.display());
    if ok == 0 {
        return Err(CliError::Runtime("every seed failed".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_seed(
    method: &dyn dipuq_core::engines::Method,
    cfg: &dipuq_core::engines::RunConfig,
    noisy: &Image,
    gt: Option<&Image>,
    dir: &Path,
    writer: &Output,
    emit: &crate::spec::Emit,
    bins: usize,
    deterministic: bool,
) -> Result<SeedMetrics, CliError> {
    let seed = cfg.seed;
    let planned = planned_artifacts(method.has_uncertainty(), gt.is_some(), emit);
    for name in &planned {
        writer.claim(&dir.join(name))?;
    }
    let run: TrainedRun = train_with(method, noisy, cfg, gt, |r| {
        if let Some(p) = r.psnr_gt {
            eprintln!("  iter {:>6}  loss {:.5}  psnr_gt {:.2}", r.iteration, r.loss, p);
        } else {
            eprintln!("  iter {:>6}  loss {:.5}  mse_noisy {:.5}", r.iteration, r.loss, r.mse_noisy);
        }
    })?;
    let pred = method.predict(&run, &mut stream(seed, Stream::Predict))?;

    if emit.trace {
        writer.write(&dir.join("trace.csv"), seed, |p| {
            Ok(write_trace_csv(&run.trace, p, !deterministic)?)
        })?;
    }
    if emit.reconstruction {
        writer.write(&dir.join("reconstruction.png"), seed, |p| {
            Ok(save_image(&pred.mean, p, BitDepth::Sixteen)?)
        })?;
    }
    if emit.checkpoint {
        writer.write(&dir.join("checkpoint.bin"), seed, |p| Ok(save_checkpoint(&run.net, p)?))?;
    }
    let mut uce = None;
    if method.has_uncertainty() {
        writer.write_text(
            &dir.join(PREDICTIVE_FILE),
            seed,
            &(serde_json::to_string(&pred)? + "\n"),
        )?;
        if emit.uncertainty {
            let path = dir.join("uncertainty.png");
            let scale = scale_sidecar_path(&path);
            writer.claim(&scale)?;
            writer.write(&path, seed, |p| {
                save_uncertainty_map(&pred.total, p)?;
                Ok(())
            })?;
            writer.record(&scale, seed)?;
        }
        if let (Some(gt), true) = (gt, emit.calibration) {
            let table = calibrate_against(&pred, gt, bins)?;
            writer.write(&dir.join("calibration.csv"), seed, |p| {
                Ok(write_calibration_csv(&table, p)?)
            })?;
            uce = Some(table.uce);
        }
    }
    let (psnr_gt, ssim_gt) = match gt {
        Some(gt) => (
            Some(psnr(&pred.mean, gt, 1.0)?),
            (gt.width() >= SSIM_WINDOW && gt.height() >= SSIM_WINDOW)
                .then(|| ssim(&pred.mean, gt))
                .transpose()?,
        ),
        None => (None, None),
    };
    let best = gt
        .is_some()
        .then(|| oracle_early_stop(&run.trace, TraceKey::PsnrGt))
        .transpose()?;
    Ok(SeedMetrics {
        psnr_gt,
        ssim_gt,
        best,
        u: method.has_uncertainty().then_some(pred.u),
        uce,
    })
}

/// Files a denoise seed directory will contain.
pub fn planned_artifacts(uncertainty: bool, has_gt: bool, emit: &crate::spec::Emit) -> Vec<String> {
    let mut names = Vec::new();
    if emit.trace {
        names.push("trace.csv");
    }
    if emit.reconstruction {
        names.push("reconstruction.png");
    }
    if emit.checkpoint {
        names.push("checkpoint.bin");
    }
    if uncertainty {
        names.push(PREDICTIVE_FILE);
        if emit.uncertainty {
            names.push("uncertainty.png");
            names.push("uncertainty.scale.txt");
        }
        if has_gt && emit.calibration {
            names.push("calibration.csv");
        }
    }
    names.into_iter().map(String::from).collect()
}

fn calibrate_against(pred: &PredictiveResult, gt: &Image, bins: usize) -> Result<CalibrationTable, CliError> {
    let err = squared_error_map(&pred.mean, gt)?;
    Ok(calibration(pred.total.data(), &err, bins)?)
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (Some(mean), std)
}

fn summary_csv(method: &str, outcomes: &[SeedOutcome]) -> String {
    let cell = |v: Option<f64>| v.map(format_value).unwrap_or_default();
    let mut out = String::from("method,seed,status,psnr_gt,ssim_gt,best_psnr_gt,best_iter,U,UCE\n");
    for o in outcomes {
        match &o.result {
            Ok(m) => out.push_str(&format!(
                "{method},{},ok,{},{},{},{},{},{}\n",
                o.seed,
                cell(m.psnr_gt),
                cell(m.ssim_gt),
                cell(m.best.map(|b| b.1)),
                m.best.map(|b| b.0.to_string()).unwrap_or_default(),
                cell(m.u),
                cell(m.uce),
            )),
            Err(_) => out.push_str(&format!("{method},{},failed,,,,,,\n", o.seed)),
        }
    }
    let ok: Vec<&SeedMetrics> = outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
    let column = |f: &dyn Fn(&SeedMetrics) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|m| f(m)).collect() };
    let cols = [
        column(&|m| m.psnr_gt),
        column(&|m| m.ssim_gt),
        column(&|m| m.best.map(|b| b.1)),
        column(&|_| None),
        column(&|m| m.u),
        column(&|m| m.uce),
    ];
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let cells: Vec<String> = cols
            .iter()
            .map(|c| {
                let (m, s) = mean_std(c);
                cell(if pick == 0 { m } else { s })
            })
            .collect();
        out.push_str(&format!("{method},{label},n={},{}\n", ok.len(), cells.join(",")));
    }
    out
}

pub fn calibrate(common: &Common, args: &CalibrateArgs) -> Result<(), CliError> {
    let pred_path = args.recon_dir.join(PREDICTIVE_FILE);
    if !pred_path.exists() {
        return Err(CliError::Runtime(format!(
            "missing artifacts in {}: expected {PREDICTIVE_FILE} (written by `dipuq denoise` for \
             methods with uncertainty)",
            args.recon_dir.display()
        )));
    }
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&pred_path).map_err(|e| CliError::io(&pred_path, e))?;
    let pred: PredictiveResult = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", pred_path.display())))?;
    let gt = load_image(&args.gt)?;
    if !gt.same_shape(&pred.mean) {
        return Err(CliError::Usage(format!(
            "ground truth is {}x{} but the reconstruction is {}x{}",
            gt.width(),
            gt.height(),
            pred.mean.width(),
            pred.mean.height()
        )));
    }
    let table = calibrate_against(&pred, &gt, args.bins)?;
    let out_dir = common.out.clone().unwrap_or_else(|| args.recon_dir.clone());
    let hash = sha256_hex(text.as_bytes());
    let writer = Output {
        force: common.force,
        command: "calibrate",
        spec_hash: spec_hash(&(hash, args.bins))?,
    };
    let path = out_dir.join("calibration.csv");
    writer.write(&path, common.seed.unwrap_or(0), |p| Ok(write_calibration_csv(&table, p)?))?;
    println!("U={}", format_value(pred.u));
    println!("UCE={}", format_value(table.uce));
    println!("pixels={} bins={} -> {}", table.total_count(), table.n_bins, path.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let reports = run_suite(args.perturb_analytic)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!("{:<20} {:>12.3e}  {status}", r.name, r.max_rel_error);
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} gradient checks exceed {GRAD_TOLERANCE:e}",
            reports.len()
        )));
    }
    println!("all {} gradient checks below {GRAD_TOLERANCE:e}", reports.len());
    Ok(())
}

