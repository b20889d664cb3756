use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rayon::prelude::*;
use serde_json::json;

use rda_inr::eval::{
    evaluate_split, isometry_defect, noise_experiment, verify_killing_identity, DerivativeMode,
    EvalConfig, TestField,
};
use rda_inr::geometry::io::{load_points, save_obj};
use rda_inr::geometry::{generate_box_dataset_sized, load_dataset, save_dataset, ScalarGrid};
use rda_inr::infer::{
    self, default_resolution, encode_shape, export_template, export_trajectory, load_latents,
    save_latents, EncodeConfig, LatentEntry,
};
use rda_inr::loss::{LossBreakdown, Mode};
use rda_inr::train::{
    init_run, load_checkpoint, save_checkpoint, train_epoch, TrainConfig, TrainState,
};

use crate::manifest::RunManifest;
use crate::{
    EncodeArgs, EncodeOptions, EvalArgs, Failure, FieldArg, GenerateArgs, ModeArg, ReconstructArgs,
    TemplateArgs, TrainArgs, TrajectoryArgs, VerifyArgs,
};

type Outcome = Result<ExitCode, Failure>;

pub const SEED_ENV: &str = "RDA_SEED";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| {
            Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))
        }),
        Err(_) => Ok(None),
    }
}

/// Directory holding the manifest for a command whose output is a file.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serialises")
}

/// Runs `body`, then finalises the manifest with the outcome.
fn tracked(manifest: RunManifest, body: impl FnOnce() -> Result<Vec<PathBuf>, Failure>) -> Outcome {
    match body() {
        Ok(outputs) => {
            manifest.finish("ok", outputs)?;
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            let msg = match &e {
                Failure::Usage(m) | Failure::Runtime(m) => m.clone(),
            };
            let _ = manifest.finish(&format!("failed: {msg}"), Vec::new());
            Err(e)
        }
    }
}

pub fn generate(a: GenerateArgs) -> Outcome {
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be at least 1".into()));
    }
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let config = json!({ "count": a.count, "dim": a.dim, "samples": a.samples });
    let manifest = RunManifest::start(&a.out, "generate", Some(seed), config)?;
    tracked(manifest, || {
        let data = generate_box_dataset_sized(a.count, a.dim as usize, seed, a.samples)?;
        Ok(save_dataset(&a.out, &data)?)
    })
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Riemannian => Mode::Riemannian,
            ModeArg::Pointwise => Mode::Pointwise,
        };
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Keeps the header and the rows of epochs before `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> std::io::Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e),
    };
    let mut out = format!("{}\n", LossBreakdown::CSV_HEADER);
    for line in text.lines().skip(1) {
        let row_epoch = line.split(',').next().and_then(|f| f.parse::<usize>().ok());
        if row_epoch.is_some_and(|e| e < epoch) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn write_latents(path: &Path, state: &TrainState) -> rda_inr::Result<()> {
    let entries: Vec<LatentEntry> = (0..state.latents.len())
        .map(|i| LatentEntry {
            shape_id: i,
            z: state.latents.get(i).to_vec(),
        })
        .collect();
    save_latents(path, &entries)
}

pub fn train(a: TrainArgs) -> Outcome {
    let data = load_dataset(&a.data)?;
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            if let Some(e) = a.epochs {
                s.config.epochs = e;
            }
            s
        }
        None => init_run(&train_config(&a)?, &data)?,
    };
    let until = state.config.epochs;
    let manifest = RunManifest::start(
        &a.out,
        "train",
        Some(state.config.seed),
        to_value(&state.config),
    )?;
    tracked(manifest, || {
        let log_path = a.out.join(TRAIN_LOG);
        let ckpt = a.out.join(CHECKPOINT);
        let config_path = a.out.join("config.json");
        let latents_path = a.out.join("latents.json");
        std::fs::write(&config_path, state.config.to_json())?;
        let mut log = truncate_log(&log_path, state.epoch)?;
        std::fs::write(&log_path, &log)?;
        while state.epoch < until {
            let completed = state.epoch;
            let terms = train_epoch(&mut state, &data)?;
            log.push_str(&terms.csv_row(completed, state.config.learning_rates(completed)));
            log.push('\n');
            std::fs::write(&log_path, &log)?;
            if a.checkpoint_every
                .is_some_and(|n| n > 0 && state.epoch % n == 0)
            {
                save_checkpoint(&state, &ckpt)?;
            }
        }
        save_checkpoint(&state, &ckpt)?;
        write_latents(&latents_path, &state)?;
        Ok(vec![ckpt, log_path, config_path, latents_path])
    })
}

fn encode_config(o: &EncodeOptions) -> Result<EncodeConfig, Failure> {
    let mut cfg = match &o.encode_config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => EncodeConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.iterations {
        cfg.iterations = n;
        cfg.lr_drop_at = cfg.lr_drop_at.min(n / 2);
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.gamma {
        cfg.gamma = v;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn encode(a: EncodeArgs) -> Outcome {
    let cfg = encode_config(&a.encode)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let samples = match &a.data {
        Some(dir) => load_dataset(dir)?.into_iter().map(|r| r.sample).collect(),
        None => a
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut s = load_points(p)?;
                s.shape_id = i;
                Ok(s)
            })
            .collect::<rda_inr::Result<Vec<_>>>()?,
    };
    let manifest = RunManifest::start(
        &parent_dir(&a.out),
        "encode",
        Some(cfg.seed),
        to_value(&cfg),
    )?;
    tracked(manifest, || {
        let entries = samples
            .par_iter()
            .map(|s| {
                let enc = encode_shape(&state.model, s, &cfg)?;
                Ok(LatentEntry {
                    shape_id: s.shape_id,
                    z: enc.z,
                })
            })
            .collect::<rda_inr::Result<Vec<_>>>()?;
        save_latents(&a.out, &entries)?;
        Ok(vec![a.out.clone()])
    })
}

/// Codes from a latent file, or the checkpoint's training codes.
fn latents_for(state: &TrainState, path: Option<&Path>) -> Result<Vec<LatentEntry>, Failure> {
    let entries = match path {
        Some(p) => load_latents(p)?,
        None => (0..state.latents.len())
            .map(|i| LatentEntry {
                shape_id: i,
                z: state.latents.get(i).to_vec(),
            })
            .collect(),
    };
    if let Some(bad) = entries.iter().find(|e| e.z.len() != state.config.d_z) {
        return Err(Failure::Runtime(format!(
            "latent for shape {} has {} entries, model expects {}",
            bad.shape_id,
            bad.z.len(),
            state.config.d_z
        )));
    }
    Ok(entries)
}

fn resolution(state: &TrainState, res: Option<usize>) -> Result<usize, Failure> {
    match res {
        Some(r) if r < 3 => Err(Failure::Usage("--res must be at least 3".into())),
        Some(r) => Ok(r),
        None => Ok(default_resolution(state.model.dim())),
    }
}

pub fn reconstruct(a: ReconstructArgs) -> Outcome {
    let state = load_checkpoint(&a.checkpoint)?;
    let res = resolution(&state, a.res)?;
    let mut entries = latents_for(&state, a.latents.as_deref())?;
    if let Some(id) = a.shape {
        entries.retain(|e| e.shape_id == id);
        if entries.is_empty() {
            return Err(Failure::Runtime(format!("no latent code for shape {id}")));
        }
    }
    let config = json!({ "resolution": res, "shapes": entries.len() });
    let manifest = RunManifest::start(&a.out, "reconstruct", None, config)?;
    tracked(manifest, || {
        let results: Vec<_> = entries
            .par_iter()
            .map(|e| {
                let path = a.out.join(format!("shape_{:03}.obj", e.shape_id));
                infer::reconstruct(&state.model, &e.z, res)
                    .and_then(|m| save_obj(&path, &m))
                    .map(|()| path)
                    .map_err(|err| format!("shape {}: {err}", e.shape_id))
            })
            .collect();
        let (ok, failed): (Vec<_>, Vec<_>) = results.into_iter().partition(Result::is_ok);
        if !failed.is_empty() {
            let msgs: Vec<String> = failed.into_iter().filter_map(Result::err).collect();
            return Err(Failure::Runtime(msgs.join("; ")));
        }
        Ok(ok.into_iter().filter_map(Result::ok).collect())
    })
}

pub fn template(a: TemplateArgs) -> Outcome {
    let state = load_checkpoint(&a.checkpoint)?;
    let res = resolution(&state, a.res)?;
    let manifest = RunManifest::start(
        &parent_dir(&a.out),
        "template",
        None,
        json!({ "resolution": res }),
    )?;
    tracked(manifest, || {
        let mesh = export_template(&state.model, res)?;
        save_obj(&a.out, &mesh)?;
        Ok(vec![a.out.clone()])
    })
}

pub fn trajectory(a: TrajectoryArgs) -> Outcome {
    let state = load_checkpoint(&a.checkpoint)?;
    let res = resolution(&state, a.res)?;
    let entries = latents_for(&state, a.latents.as_deref())?;
    let entry = entries
        .into_iter()
        .find(|e| e.shape_id == a.shape)
        .ok_or_else(|| Failure::Runtime(format!("no latent code for shape {}", a.shape)))?;
    let config = json!({ "resolution": res, "shape": a.shape });
    let manifest = RunManifest::start(&a.out, "trajectory", None, config)?;
    tracked(manifest, || {
        Ok(export_trajectory(&state.model, &entry.z, res, &a.out)?.files)
    })
}

/// Lattice of `n` nodes per axis strictly inside `[-1, 1]^dim`.
fn probe_points(dim: usize, n: usize) -> Vec<f64> {
    let grid = ScalarGrid::from_fn(dim, n + 2, |_| 0.0);
    (0..grid.node_count())
        .filter(|&i| grid.unravel(i).iter().all(|&k| k > 0 && k <= n))
        .flat_map(|i| grid.node_position(i))
        .collect()
}

pub fn eval(a: EvalArgs) -> Outcome {
    if let Some(bad) = a.noise.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Failure::Usage(format!(
            "--noise values must be non-negative, got {bad}"
        )));
    }
    let encode = encode_config(&a.encode)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let res = resolution(&state, a.res)?;
    let data = load_dataset(&a.data)?;
    if data[0].spec.dim() != state.model.dim() {
        return Err(Failure::Runtime(format!(
            "dataset is {}D, model is {}D",
            data[0].spec.dim(),
            state.model.dim()
        )));
    }
    let cfg = EvalConfig {
        seed: encode.seed,
        encode,
        resolution: res,
        ..EvalConfig::default()
    };
    let mut config = to_value(&cfg);
    config["noise"] = json!(a.noise);
    config["isometry"] = json!(a.isometry);
    let manifest = RunManifest::start(&a.out, "eval", Some(cfg.seed), config)?;
    tracked(manifest, || {
        let mut outputs = Vec::new();
        let mut emit =
            |report: &rda_inr::eval::MetricReport, stem: String| -> rda_inr::Result<()> {
                report.write(&a.out, &stem)?;
                println!(
                    "{stem}: cd mean {:.6e} median {:.6e}, failed {}",
                    report.cd.mean, report.cd.median, report.failed
                );
                outputs.push(a.out.join(format!("{stem}.csv")));
                outputs.push(a.out.join(format!("{stem}.json")));
                Ok(())
            };
        if a.noise.is_empty() {
            emit(&evaluate_split(&state.model, &data, &cfg), "metrics".into())?;
        } else {
            for (sd, report) in noise_experiment(&state.model, &data, &a.noise, &cfg) {
                emit(&report, format!("noise_{sd}"))?;
            }
        }
        if a.isometry {
            let dim = state.model.dim();
            let points = probe_points(dim, if dim == 2 { 32 } else { 12 });
            let codes: Vec<Vec<f64>> = (0..state.latents.len())
                .map(|i| state.latents.get(i).to_vec())
                .collect();
            let defect = isometry_defect(&state.model.velocity, &codes, &points)?;
            println!("isometry defect {defect:.6e}");
            let path = a.out.join("isometry.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&json!({ "isometry_defect": defect }))?,
            )?;
            outputs.push(path);
        }
        Ok(outputs)
    })
}

pub fn verify(a: VerifyArgs) -> Outcome {
    let field = match a.field {
        FieldArg::Sine => TestField::default(),
        FieldArg::Swirl => TestField::Swirl,
        FieldArg::Constant => TestField::Constant { value: [1.0, 1.0] },
        FieldArg::Zero => TestField::Zero,
    };
    let mode = if a.fd {
        DerivativeMode::FiniteDifference
    } else {
        DerivativeMode::Auto
    };
    let config =
        json!({ "res": a.res, "eta": a.eta, "field": to_value(&field), "finite_difference": a.fd });
    let manifest = RunManifest::start(&a.out, "verify-c", None, config)?;
    let mut passed = false;
    let code = tracked(manifest, || {
        let check = verify_killing_identity(&field, a.eta, a.res, mode)?;
        println!("lhs {:.12e}", check.lhs);
        println!("rhs {:.12e}", check.rhs);
        println!("rel_err {:.3e}", check.rel_err);
        passed = check.rel_err < 1e-3;
        let path = a.out.join("verify_c.json");
        let body = json!({ "lhs": check.lhs, "rhs": check.rhs, "rel_err": check.rel_err, "passed": passed });
        std::fs::write(&path, serde_json::to_string_pretty(&body)?)?;
        Ok(vec![path])
    })?;
    if passed {
        Ok(code)
    } else {
        eprintln!("error: relative error is not below 1e-3");
        Ok(ExitCode::from(1))
    }
}
