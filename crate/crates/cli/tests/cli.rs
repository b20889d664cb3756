use std::path::Path;
use std::process::{Command, Output};

fn rda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rda"))
        .args(args)
        .env_remove("RDA_SEED")
        .output()
        .expect("binary runs")
}

fn rda_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rda"))
        .args(args)
        .env(key, val)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_files(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == ext)
        })
        .count()
}

fn manifest(dir: &Path, cmd: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{cmd}.manifest.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Small model so the smoke runs stay in seconds.
const SMOKE_CONFIG: &str = r#"{
    "epochs": 20, "batch_size": 8, "d_z": 8, "stages": 4, "d_vel": 16, "vel_hidden": 1,
    "d_mu": 16, "n_hidden": 2,
    "mc": { "surface": 64, "domain": 64, "eikonal": 64, "occupancy": 64 }
}"#;

fn smoke_run(root: &Path, epochs: usize) -> std::path::PathBuf {
    let data = root.join("data");
    if !data.join("dataset.json").exists() {
        let o = rda(&[
            "generate",
            "--count",
            "16",
            "--dim",
            "2",
            "--seed",
            "1",
            "--samples",
            "256",
            "--out",
            s(&data),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let cfg = root.join("smoke.json");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let out = root.join(format!("run{epochs}"));
    let e = epochs.to_string();
    let o = rda(&[
        "--threads",
        "1",
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--epochs",
        &e,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generate_writes_specs_points_and_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = rda(&[
        "generate",
        "--count",
        "16",
        "--dim",
        "2",
        "--seed",
        "1",
        "--samples",
        "128",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(index["shapes"].as_array().unwrap().len(), 16);
    assert_eq!(count_files(&out.join("points"), "pts"), 16);
    assert_eq!(count_files(&out.join("meshes"), "obj"), 16);
    let m = manifest(&out, "generate");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 1);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 33);
}

#[test]
fn generate_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(
            code(&rda(&[
                "generate",
                "--count",
                "3",
                "--dim",
                "3",
                "--seed",
                "4",
                "--samples",
                "64",
                "--out",
                s(out)
            ])),
            0
        );
    }
    for f in [
        "dataset.json",
        "meshes/shape_002.obj",
        "points/shape_001.pts",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_env_applies_unless_flag_given() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let base = ["generate", "--count", "1", "--samples", "8", "--out"];
    let mut args: Vec<&str> = base.to_vec();
    args.push(s(&a));
    assert_eq!(code(&rda_env(&args, "RDA_SEED", "9")), 0);
    assert_eq!(manifest(&a, "generate")["seed"], 9);
    args.pop();
    args.extend([s(&b), "--seed", "3"]);
    assert_eq!(code(&rda_env(&args, "RDA_SEED", "9")), 0);
    assert_eq!(manifest(&b, "generate")["seed"], 3);
    args.truncate(args.len() - 2);
    args.push(s(&b));
    assert_eq!(code(&rda_env(&args, "RDA_SEED", "nine")), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = rda(&["generate", "--dim", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    let o = rda(&["train", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data"));
    assert_eq!(code(&rda(&[])), 2);
    assert_eq!(code(&rda(&["frobnicate"])), 2);
    assert_eq!(
        code(&rda(&["generate", "--count", "0", "--out", s(&out)])),
        2
    );
    assert_eq!(
        code(&rda(&["--threads", "0", "verify-c", "--out", s(&out)])),
        2
    );
    assert_eq!(
        code(&rda(&[
            "train", "--data", "d", "--out", "o", "--mode", "sideways"
        ])),
        2
    );
    assert_eq!(
        code(&rda(&["encode", "--checkpoint", "c", "--out", "o"])),
        2
    );
    assert_eq!(
        code(&rda(&[
            "eval",
            "--checkpoint",
            "c",
            "--data",
            "d",
            "--out",
            s(&out),
            "--noise",
            "-1"
        ])),
        2
    );
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&rda(&[
            "generate",
            "--count",
            "2",
            "--samples",
            "16",
            "--out",
            s(&data)
        ])),
        0
    );
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "epochs": 2, "learning_rate": 1.0 }"#).unwrap();
    let o = rda(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 2);
    std::fs::write(&cfg, r#"{ "precision": "f32" }"#).unwrap();
    let o = rda(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("o");
    assert_eq!(
        code(&rda(&["train", "--data", s(&missing), "--out", s(&out)])),
        1
    );
    assert_eq!(
        code(&rda(&[
            "template",
            "--checkpoint",
            s(&missing),
            "--out",
            s(&out.join("t.obj"))
        ])),
        1
    );
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = rda(&[
        "template",
        "--checkpoint",
        s(&junk),
        "--out",
        s(&out.join("t.obj")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
    let o = rda(&["verify-c", "--field", "constant", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(manifest(&out, "verify-c")["status"]
        .as_str()
        .unwrap()
        .starts_with("failed"));
}

#[test]
fn non_finite_loss_names_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&rda(&[
            "generate",
            "--count",
            "2",
            "--samples",
            "16",
            "--out",
            s(&data)
        ])),
        0
    );
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{ "epochs": 3, "batch_size": 2, "d_z": 4, "stages": 2, "d_vel": 8, "d_mu": 8, "n_hidden": 1,
             "lr_template": 1e300, "lr_velocity": 1e300, "lr_latent": 1e300,
             "mc": { "surface": 16, "domain": 16, "eikonal": 16, "occupancy": 16 } }"#,
    )
    .unwrap();
    let o = rda(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn verify_default_field_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = rda(&["verify-c", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["lhs", "rhs", "rel_err"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "{text}");
    }
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify_c.json")).unwrap())
            .unwrap();
    assert!(v["rel_err"].as_f64().unwrap() < 1e-3);
    assert_eq!(manifest(dir.path(), "verify-c")["status"], "ok");
    let o = rda(&["verify-c", "--fd", "--res", "9", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn smoke_training_and_downstream_commands() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path(), 20);
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);
    assert!(log.starts_with("epoch,"));
    let m = manifest(&run, "train");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["epochs"], 20);
    assert_eq!(m["config"]["d_vel"], 16);
    assert_eq!(m["config"]["eps"], 0.05);

    let tpl = dir.path().join("tpl").join("template.obj");
    let o = rda(&[
        "template",
        "--checkpoint",
        s(&ckpt),
        "--res",
        "64",
        "--out",
        s(&tpl),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count_files(tpl.parent().unwrap(), "obj"), 1);
    assert_eq!(manifest(tpl.parent().unwrap(), "template")["status"], "ok");

    let traj = dir.path().join("traj");
    let o = rda(&[
        "trajectory",
        "--checkpoint",
        s(&ckpt),
        "--shape",
        "3",
        "--res",
        "48",
        "--out",
        s(&traj),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count_files(&traj, "obj"), 5);
    assert!(traj.join("speeds.csv").exists());
    let o = rda(&[
        "trajectory",
        "--checkpoint",
        s(&ckpt),
        "--shape",
        "99",
        "--out",
        s(&traj),
    ]);
    assert_eq!(code(&o), 1);

    let lat = dir.path().join("enc").join("latents.json");
    let pts = dir.path().join("data/points/shape_000.pts");
    let o = rda(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--points",
        s(&pts),
        "--iterations",
        "20",
        "--out",
        s(&lat),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let codes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&lat).unwrap()).unwrap();
    assert_eq!(codes.as_array().unwrap().len(), 1);

    let rec = dir.path().join("rec");
    let o = rda(&[
        "reconstruct",
        "--checkpoint",
        s(&ckpt),
        "--latents",
        s(&lat),
        "--res",
        "48",
        "--out",
        s(&rec),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rec.join("shape_000.obj").exists());

    let ev = dir.path().join("eval");
    let o = rda(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&dir.path().join("data")),
        "--out",
        s(&ev),
        "--noise",
        "0.01",
        "--iterations",
        "10",
        "--res",
        "32",
        "--isometry",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(ev.join("noise_0.01.csv")).unwrap();
    assert!(csv.starts_with("shape_id,cd,em,status"));
    assert_eq!(csv.lines().count(), 1 + 16 + 2);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("noise_0.01.json")).unwrap())
            .unwrap();
    assert_eq!(summary["shapes"], 16);
    assert!(ev.join("isometry.json").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = smoke_run(dir.path(), 7);
    let part = smoke_run(dir.path(), 2);
    let o = rda(&[
        "--threads",
        "1",
        "train",
        "--resume",
        s(&part.join("checkpoint.bin")),
        "--data",
        s(&dir.path().join("data")),
        "--out",
        s(&part),
        "--epochs",
        "7",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.bin", "train_log.csv", "latents.json"] {
        assert_eq!(
            std::fs::read(full.join(f)).unwrap(),
            std::fs::read(part.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn identical_runs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = smoke_run(a.path(), 3);
    let rb = smoke_run(b.path(), 3);
    for f in [
        "checkpoint.bin",
        "train_log.csv",
        "latents.json",
        "config.json",
    ] {
        assert_eq!(
            std::fs::read(ra.join(f)).unwrap(),
            std::fs::read(rb.join(f)).unwrap(),
            "{f}"
        );
    }
}
