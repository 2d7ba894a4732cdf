use std::fs;
use std::path::Path;

use proxpan::dataset::{load_entry, load_generator, load_samples, split_dataset, synth_dataset, DatasetManifest, GeneratorModel};
use proxpan::io::{export_preview, read_raster, write_raster};
use proxpan::metrics::{evaluate_full, evaluate_reduced, reports_csv, summarize, MetricsReport};
use proxpan::model::{reconstruct_hrms, FusionPair};
use proxpan::net::{load_checkpoint, network_forward, save_checkpoint, NetworkParams};
use proxpan::solver::solve as solve_pair;
use proxpan::train::{finite_diff_check, history_csv, train as train_net, ParamSelection, TrainingSample};
use proxpan::wald::{blur_decimate, exp_upsample};
use proxpan::{MultibandImage, Precision, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{require, RunConfig};
use crate::CliError;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| proxpan::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(proxpan::Error::from)?;
    write_text(path, &(text + "\n"))
}

/// `run.json`: resolved configuration, command and code version.
pub fn write_run_record(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
    });
    write_json(&out.join("run.json"), &record)
}

fn read_as<T: Scalar>(path: &Path) -> Result<MultibandImage<T>, CliError> {
    Ok(read_raster(path)?.cast())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sc = cfg.synth_config();
    let model = GeneratorModel::random(sc.kernel, sc.features, sc.bands, cfg.seed)?;
    let manifest = synth_dataset(&sc, &model, out, cfg.threads)?;
    manifest.save(out.join("manifest.jsonl"))?;
    let (train, test) = if manifest.len() >= 2 {
        split_dataset(&manifest, cfg.split.fraction, cfg.seed)?
    } else {
        (manifest.clone(), DatasetManifest::default())
    };
    train.save(out.join("train.jsonl"))?;
    test.save(out.join("test.jsonl"))?;
    println!(
        "synth: {} samples ({} train, {} test) in {}",
        manifest.len(),
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

pub fn solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => solve_as::<f32>(cfg, out),
        Precision::F64 => solve_as::<f64>(cfg, out),
    }
}

fn solve_as<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let generator = load_generator(require(&cfg.paths.generator, "generator")?)?;
    let pan = read_as::<T>(require(&cfg.paths.pan, "pan")?)?;
    let ms_up = read_as::<T>(require(&cfg.paths.ms_up, "ms_up")?)?;
    let pair = FusionPair::new(pan, ms_up)?;
    let solver_cfg = cfg.solver_config()?;
    let (features, trace) = solve_pair(&pair, &generator.analysis.cast::<T>(), &solver_cfg)?;
    let fused = reconstruct_hrms(&features, &generator.synthesis.cast::<T>())?;
    write_raster(&fused, out.join("fused.mbt"))?;
    preview(cfg, &fused, out)?;
    let mut csv = String::from("sweep,objective\n");
    for (i, v) in trace.objective_per_sweep.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    write_text(&out.join("trace.csv"), &csv)?;
    write_json(
        &out.join("solve.json"),
        &json!({
            "sweeps_run": trace.sweeps_run,
            "converged": trace.converged,
            "eta_u": trace.steps[0],
            "eta_v": trace.steps[1],
            "eta_c": trace.steps[2],
        }),
    )?;
    println!(
        "solve: {} sweeps, final objective {}",
        trace.sweeps_run,
        trace.objective_per_sweep.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn preview<T: Scalar>(cfg: &RunConfig, img: &MultibandImage<T>, out: &Path) -> Result<(), CliError> {
    let bands = cfg.eval.preview_bands;
    // fewer than three bands: repeat the last one
    let clamp = |b: usize| b.min(img.bands() - 1);
    export_preview(img, [clamp(bands[0]), clamp(bands[1]), clamp(bands[2])], out.join("preview.ppm"))?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, out),
        Precision::F64 => train_as::<f64>(cfg, out),
    }
}

fn manifest_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn train_as<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest_path = require(&cfg.paths.manifest, "manifest")?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let samples: Vec<TrainingSample<T>> = load_samples(manifest_root(manifest_path), &manifest)?
        .iter()
        .map(|s| s.cast())
        .collect();
    let shape = cfg.net_shape()?;
    let params = NetworkParams::<T>::init(shape, cfg.seed)?;
    let (params, history) = train_net(&samples, params, &cfg.train_config()?)?;
    save_checkpoint(&params, out.join("checkpoint.ppn"))?;
    write_text(&out.join("history.csv"), &history_csv(&history))?;
    if let Some(last) = history.last() {
        println!("train: {} epochs, final mean loss {}", history.len(), last.mean_loss);
    } else {
        println!("train: 0 epochs");
    }
    Ok(())
}

pub fn infer(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => infer_as::<f32>(cfg, out),
        Precision::F64 => infer_as::<f64>(cfg, out),
    }
}

fn upsampled_ms<T: Scalar>(cfg: &RunConfig) -> Result<MultibandImage<T>, CliError> {
    match (&cfg.paths.ms_up, &cfg.paths.ms) {
        (Some(p), _) => read_as(p),
        (None, Some(p)) => Ok(exp_upsample(&read_as::<T>(p)?, cfg.eval.ratio)?),
        (None, None) => Err(CliError::Config("missing path `ms_up` or `ms`".into())),
    }
}

fn infer_as<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let params = load_checkpoint(require(&cfg.paths.checkpoint, "checkpoint")?)?.cast::<T>();
    let pan = read_as::<T>(require(&cfg.paths.pan, "pan")?)?;
    let pair = FusionPair::new(pan, upsampled_ms(cfg)?)?;
    let (fused, _) = network_forward(&pair, &params)?;
    write_raster(&fused, out.join("fused.mbt"))?;
    preview(cfg, &fused, out)?;
    println!("infer: wrote {}x{}x{} raster", fused.height(), fused.width(), fused.bands());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg, out),
        Precision::F64 => eval_as::<f64>(cfg, out),
    }
}

fn write_reports(out: &Path, rows: &[(String, MetricsReport)]) -> Result<(), CliError> {
    write_text(&out.join("report.csv"), &reports_csv(rows.iter().map(|(id, r)| (id.as_str(), r))))?;
    let mut lines = String::new();
    for (id, r) in rows {
        let mut v = serde_json::to_value(r).map_err(proxpan::Error::from)?;
        v["id"] = json!(id);
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    write_text(&out.join("report.jsonl"), &lines)
}

fn eval_as<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let p = &cfg.paths;
    let ratio = cfg.eval.ratio;
    if let (Some(manifest_path), Some(ck)) = (&p.manifest, &p.checkpoint) {
        let params = load_checkpoint(ck)?.cast::<T>();
        let manifest = DatasetManifest::load(manifest_path)?;
        let mut rows = Vec::new();
        let (mut net, mut exp) = (Vec::new(), Vec::new());
        for entry in &manifest.entries {
            let e = load_entry(manifest_root(manifest_path), entry)?;
            let gt = e.gt.cast::<T>();
            let pair = FusionPair::new(e.pan.cast::<T>(), e.ms_up.cast::<T>())?;
            let (fused, _) = network_forward(&pair, &params)?;
            let rn = evaluate_reduced(&fused, &gt, entry.ratio)?;
            let re = evaluate_reduced(&pair.ms_up, &gt, entry.ratio)?;
            rows.push((format!("{}/net", entry.id), rn.clone()));
            rows.push((format!("{}/exp", entry.id), re.clone()));
            net.push(rn);
            exp.push(re);
        }
        write_reports(out, &rows)?;
        let summary = json!({ "net": summarize(&net), "exp": summarize(&exp) });
        write_json(&out.join("summary.json"), &summary)?;
        println!("{}", serde_json::to_string_pretty(&summary).map_err(proxpan::Error::from)?);
        return Ok(());
    }
    let fused = read_as::<T>(require(&p.fused, "fused")?)?;
    let report = if let Some(reference) = &p.reference {
        evaluate_reduced(&fused, &read_as::<T>(reference)?, ratio)?
    } else {
        let ms = read_as::<T>(require(&p.ms, "ms")?)?;
        let pan = read_as::<T>(require(&p.pan, "pan")?)?;
        let pan_lr = match &p.pan_lr {
            Some(path) => read_as::<T>(path)?,
            None => blur_decimate(&pan, ratio)?,
        };
        evaluate_full(&fused, &ms, &pan, &pan_lr)?
    };
    write_reports(out, &[("fused".to_string(), report.clone())])?;
    println!("{}", report.json_line()?);
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let shape = cfg.net_shape()?;
    let params = NetworkParams::<f64>::init(shape, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let pan = MultibandImage::random_uniform(g.height, g.width, 1, 0.0, 1.0, &mut rng);
    let ms_up = MultibandImage::random_uniform(g.height, g.width, shape.bands, 0.0, 1.0, &mut rng);
    let truth = MultibandImage::random_uniform(g.height, g.width, shape.bands, 0.0, 1.0, &mut rng);
    let sample = TrainingSample {
        pair: FusionPair::new(pan, ms_up)?,
        truth,
    };
    let selection = ParamSelection::Sample {
        count: g.samples,
        seed: cfg.seed,
    };
    let report = finite_diff_check(&selection, &params, &sample, g.perturbation)?;
    let pass = report.max_rel_error <= g.tolerance;
    write_json(
        &out.join("gradcheck.json"),
        &json!({
            "checked": report.checked,
            "max_rel_error": report.max_rel_error,
            "max_strict_error": report.max_strict_error,
            "loss": report.loss,
            "worst_tensor": report.worst.0,
            "worst_element": report.worst.1,
            "tolerance": g.tolerance,
            "pass": pass,
        }),
    )?;
    let line = format!(
        "gradcheck: {} parameters, max relative error {:.3e} (tolerance {:.1e}, f64)",
        report.checked, report.max_rel_error, g.tolerance
    );
    if pass {
        println!("PASS {line}");
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(format!("FAIL {line}")))
    }
}
