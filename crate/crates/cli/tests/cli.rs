use std::path::Path;
use std::process::{Command, Output};

fn protodiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protodiff"))
        .args(args)
        .env_remove("PROTODIFF_CONFIG")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const SUBCOMMANDS: [&str; 9] = [
    "synth-data",
    "train",
    "evaluate",
    "encode",
    "reconstruct",
    "classify",
    "explain",
    "export-latents",
    "stats",
];

#[test]
fn help_lists_every_subcommand() {
    let out = protodiff(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out.stdout);
    for name in SUBCOMMANDS {
        assert!(help.contains(name), "{name} missing from\n{help}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let out = protodiff(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("--config"));

    assert_eq!(protodiff(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(protodiff(&["evaluate"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"preset": "toy"}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = protodiff(&["train", "--config", cfg, "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("no_such_key"));
    let out = protodiff(&["train", "--config", cfg, "--set", "seed=abc"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.safetensors");
    let out = protodiff(&["evaluate", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    // a config without a manifest is well formed but cannot train
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"preset": "toy"}"#).unwrap();
    let out = protodiff(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

fn run_ok(args: &[&str]) -> String {
    let out = protodiff(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}\nstderr:\n{}", text(&out.stderr));
    text(&out.stdout)
}

#[test]
fn synthetic_data_to_explanations() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let p = |path: &Path| path.to_str().unwrap().to_string();
    run_ok(&[
        "synth-data", "--out", &p(&data), "--train", "8", "--val", "2", "--test", "3", "--image-size", "16", "--quiet",
    ]);
    assert!(data.join("class1/00012.png").exists());

    let cfg = root.join("exp.json");
    std::fs::write(
        &cfg,
        r#"{
            "preset": "toy",
            "manifest": "data/manifest.csv",
            "output_dir": "run",
            "image_size": 16,
            "base_channels": 4,
            "group_norm_groups": 2,
            "latent_dim": 8,
            "time_embed_dim": 8,
            "diffusion_steps": 20,
            "decode_steps": 4,
            "invert_steps": 4,
            "per_class": 4,
            "k": 3,
            "warmup_epochs": 1,
            "joint_epochs": 1
        }"#,
    )
    .unwrap();
    let ckpt = run_ok(&["train", "--config", &p(&cfg), "--seed", "3", "--quiet"]);
    let ckpt = ckpt.trim().to_string();
    assert!(ckpt.ends_with("model.safetensors"));
    let run = root.join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 3);

    let eval_path = root.join("eval.json");
    run_ok(&["evaluate", "--checkpoint", &ckpt, "--out", &p(&eval_path), "--quiet"]);
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval_path).unwrap()).unwrap();
    assert_eq!(eval["predictions"].as_array().unwrap().len(), 6);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let reports = root.join("reports");
    run_ok(&["explain", "--checkpoint", &ckpt, "--out", &p(&reports), "--quiet"]);
    let report_dir = reports.join("class0_00010");
    assert!(report_dir.join("grid.png").exists());
    let grid = image::open(report_dir.join("grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (80, 16));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["prototypes"].as_array().unwrap().len(), 3);

    let latents = root.join("latents.csv");
    run_ok(&["export-latents", "--checkpoint", &ckpt, "--out", &p(&latents), "--quiet"]);
    assert_eq!(std::fs::read_to_string(&latents).unwrap().lines().count(), 17);
    let stats: serde_json::Value = serde_json::from_str(&run_ok(&["stats", "--latents", &p(&latents)])).unwrap();
    assert_eq!(stats["intra_pairs"], 56);
    assert_eq!(stats["inter_pairs"], 64);

    let image = data.join("class1/00011.png");
    let z: Vec<f32> = serde_json::from_str(&run_ok(&["encode", "--checkpoint", &ckpt, "--image", &p(&image)])).unwrap();
    assert_eq!(z.len(), 8);
    let pred: serde_json::Value = serde_json::from_str(&run_ok(&[
        "classify", "--checkpoint", &ckpt, "--image", &p(&image), "--index", &p(&run.join("index.pdix")),
    ]))
    .unwrap();
    assert_eq!(pred["neighbors"].as_array().unwrap().len(), 3);
    let recon = root.join("recon");
    run_ok(&["reconstruct", "--checkpoint", &ckpt, "--image", &p(&image), "--out-dir", &p(&recon), "--decode-steps", "2", "--quiet"]);
    assert!(recon.join("before.png").exists() && recon.join("after.png").exists());

    // same seed, same metrics; different seed, different metrics
    let again = root.join("again");
    run_ok(&["train", "--config", &p(&cfg), "--seed", "3", "--set", &format!("output_dir={}", p(&again)), "--set", "log_wall_time=false", "--quiet"]);
    let other = root.join("other");
    run_ok(&["train", "--config", &p(&cfg), "--seed", "3", "--set", &format!("output_dir={}", p(&other)), "--set", "log_wall_time=false", "--quiet"]);
    let a = std::fs::read(again.join("metrics.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(other.join("metrics.jsonl")).unwrap());
    let diff = root.join("diff");
    run_ok(&["train", "--config", &p(&cfg), "--seed", "4", "--set", &format!("output_dir={}", p(&diff)), "--set", "log_wall_time=false", "--quiet"]);
    assert_ne!(a, std::fs::read(diff.join("metrics.jsonl")).unwrap());
}
