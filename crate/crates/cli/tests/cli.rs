use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "cli-tiny"
methods = ["NORMAL", "SD"]
seeds = [0]
eval_pool = 1

[data]
kind = "synthetic"
image_size = 32
n_source = 4
n_train_target = 2
n_proximity = 2
n_validation = 2
seed = 3

[architecture]
scale = 0.03125

[teacher.pretrain.schedule]
max_epochs = 1
steps_per_epoch = 1
batch_size = 2

[pipeline]
crop = 16
pool = 1
"#;

fn esd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esd")).args(args).output().expect("spawn esd")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = TINY.to_string();
    for stage in ["distill", "frozen", "finetune", "normal"] {
        cfg.push_str(&format!(
            "\n[pipeline.{stage}.schedule]\nmax_epochs = 1\nsteps_per_epoch = 1\nbatch_size = 2\n"
        ));
    }
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn profile_prints_params_and_flops() {
    let o = esd(&["profile", "--arch", "student", "--resolution", "256"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("params:"), "{out}");
    assert!(out.contains("GFLOPs"), "{out}");
}

#[test]
fn profile_json_matches_between_resolutions_in_params() {
    let a = esd(&["profile", "--arch", "teacher", "--resolution", "64", "--json"]);
    let b = esd(&["profile", "--arch", "teacher", "--resolution", "128", "--json"]);
    let pa: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let pb: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(pa["param_count"], pb["param_count"]);
    assert!(pb["flops"].as_u64().unwrap() > pa["flops"].as_u64().unwrap());
}

#[test]
fn invalid_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "methods = []\n").unwrap();
    let o = esd(&["matrix", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).contains("error"), "{}", text(&o));

    let o = esd(&["matrix", "--config", "/nonexistent/x.toml"]);
    assert!(!o.status.success());

    let o = esd(&["train"]);
    assert!(!o.status.success());
    assert!(text(&o).to_lowercase().contains("usage"), "{}", text(&o));
}

#[test]
fn synth_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");

    let o = esd(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for d in ["source", "target", "proximity", "validation"] {
        assert!(data.join(d).join("images").is_dir(), "{d}");
    }

    let o = esd(&["train", "--config", &cfg, "--method", "SD", "--seed", "0", "--out", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let cell = runs.join("SD").join("0");
    for f in ["config.echo", "steps.csv", "report.json", "stage1_distill.ckpt", "stage2_frozen.ckpt", "stage3_finetune.ckpt"] {
        assert!(cell.join(f).is_file(), "missing {f}");
    }
    let header = fs::read_to_string(cell.join("steps.csv")).unwrap();
    assert!(header.starts_with("step,loss,n_target,n_proximity,lr"));

    let ckpt = cell.join("stage3_finetune.ckpt");
    let o = esd(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.join("validation").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["n_images"], 2);
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    let o = esd(&["report", "--out", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(runs.join("records.csv").is_file());
    assert!(runs.join("tables").join("compute.csv").is_file());
}

#[test]
fn matrix_exit_code_reflects_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let runs = dir.path().join("runs");
    // A missing teacher checkpoint makes every cell unrunnable.
    let o = esd(&[
        "matrix",
        "--config",
        &cfg,
        "--set",
        "teacher.checkpoint=\"/nonexistent/teacher.ckpt\"",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert!(!o.status.success(), "{}", text(&o));
}
