use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volage::checkpoint::{save_checkpoint, CheckpointDoc};
use volage::data::{load_manifest, read_raw, sidecar_path};
use volage::{BrainAgeModel, ModelConfig, Tensor};

fn volage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volage")).args(args).output().unwrap()
}

fn volage_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volage")).args(args).env(key, val).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"conv_channels": [2, 4], "dense_widths": [8, 1], "attention_kernel": 3,
            "input_shape": [16, 16, 16], "flatten_features": null},
  "train": {"epochs": 2, "learning_rate": 0.001}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn synth(dir: &Path, n: usize, shape: &str, seed: u64, name: &str) -> PathBuf {
    let n = n.to_string();
    let seed = seed.to_string();
    let o = volage(&["synth", "--out", s(dir), "--n", &n, "--shape", shape, "--seed", &seed, "--name", name]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join(format!("{name}.csv"))
}

#[test]
fn synth_writes_reproducible_cohort() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth(a.path(), 10, "32,32,32", 7, "synth");
    synth(b.path(), 10, "32,32,32", 7, "synth");
    let m = load_manifest(&ma).unwrap();
    assert_eq!(m.rows.len(), 10);
    let raws = std::fs::read_dir(a.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "f32raw")).count();
    assert_eq!(raws, 10);
    for row in &m.rows {
        let pa = a.path().join(&row.path);
        let pb = b.path().join(&row.path);
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(read_raw(&pa, sidecar_path(&pa)).unwrap().shape(), &[32, 32, 32]);
    }
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(b.path().join("synth.csv")).unwrap());
}

#[test]
fn synth_rejects_single_subject() {
    let d = tempfile::tempdir().unwrap();
    let o = volage(&["synth", "--out", s(d.path()), "--n", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn params_totals() {
    let o = volage(&["params"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().last().unwrap() == "total 5408228", "{out}");
    assert!(out.contains("conv1.weight") && out.contains("attention.kernel"));
    let o = volage(&["params", "--attention", "none"]);
    assert_eq!(stdout(&o).lines().last().unwrap(), "total 5407541");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), 4, "16,16,16", 1, "c");
    let cfg = write(d.path(), "bad.json", r#"{"train": {"epochs": 1, "learnin_rate": 0.1}}"#);
    let ck = d.path().join("m.ckpt");
    let h = d.path().join("h.csv");
    let o = volage(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck), "--history", s(&h)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
    assert!(!ck.exists());
}

#[test]
fn train_is_deterministic_and_thread_independent() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), 12, "16,16,16", 2, "c");
    let cfg = write(d.path(), "tiny.json", TINY);
    let run = |tag: &str, threads: Option<&str>| {
        let ck = d.path().join(format!("{tag}.ckpt"));
        let h = d.path().join(format!("{tag}.csv"));
        let args = ["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck), "--history", s(&h), "--seed", "3"];
        let o = match threads {
            Some(t) => volage_env(&args, "VOLAGE_THREADS", t),
            None => volage(&args),
        };
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("val_mae="));
        (std::fs::read(ck).unwrap(), std::fs::read_to_string(h).unwrap())
    };
    let a = run("a", None);
    let b = run("b", None);
    let c = run("c", Some("1"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(&a.0[..8], b"VOLAGE01");
    assert!(a.1.starts_with("epoch,train_mae,val_mae,loss\n"));
    assert_eq!(a.1.lines().count(), 3);
}

#[test]
fn bad_thread_count_rejected() {
    let o = volage_env(&["params"], "VOLAGE_THREADS", "zero");
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_crosseval_and_error_codes() {
    let d = tempfile::tempdir().unwrap();
    let home = synth(&d.path().join("home"), 8, "16,16,16", 4, "home");
    let away = synth(&d.path().join("away"), 6, "16,16,16", 5, "away");
    let big = synth(&d.path().join("big"), 3, "20,20,20", 6, "big");
    let cfg = write(d.path(), "tiny.json", TINY);
    let ck = d.path().join("m.ckpt");
    let h = d.path().join("h.csv");
    let o = volage(&["train", "--data", s(&home), "--config", s(&cfg), "--out", s(&ck), "--history", s(&h)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let json = d.path().join("eval.json");
    let o = volage(&["eval", "--ckpt", s(&ck), "--data", s(&home), "--json", s(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mae=") && stdout(&o).contains("rmse=") && stdout(&o).contains("cross=false"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["n"], 8);

    let o = volage(&["crosseval", "--ckpt", s(&ck), "--data", s(&away), "--json", s(&json)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("cross=true") && out.contains("trained_on=home") && out.contains("evaluated_on=away"), "{out}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["cross"], true);

    let o = volage(&["eval", "--ckpt", s(&ck), "--data", s(&big)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let bytes = std::fs::read(&ck).unwrap();
    let cut = d.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&volage(&["eval", "--ckpt", s(&cut), "--data", s(&home)])), 6);
    let mut magic = bytes;
    magic[..8].copy_from_slice(b"NOTACKPT");
    std::fs::write(&cut, &magic).unwrap();
    assert_eq!(code(&volage(&["eval", "--ckpt", s(&cut), "--data", s(&home)])), 6);

    let o = volage(&["eval", "--ckpt", s(&d.path().join("missing.ckpt")), "--data", s(&home)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn shape_mismatch_in_training() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), 4, "20,20,20", 1, "c");
    let cfg = write(d.path(), "tiny.json", TINY);
    let o = volage(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&d.path().join("m")), "--history", s(&d.path().join("h"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn divergence_exits_five() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), 6, "16,16,16", 1, "c");
    let cfg = write(d.path(), "tiny.json", TINY);
    let o = volage(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--out", s(&d.path().join("m")), "--history", s(&d.path().join("h")),
        "--lr", "1e30", "--epochs", "20",
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn overfit_one_sample_then_eval() {
    let d = tempfile::tempdir().unwrap();
    let full = synth(d.path(), 2, "16,16,16", 9, "pair");
    let text = std::fs::read_to_string(&full).unwrap();
    let one: Vec<&str> = text.lines().take(2).collect();
    let data = write(d.path(), "one.csv", &(one.join("\n") + "\n"));
    let cfg = write(
        d.path(),
        "overfit.json",
        r#"{
  "model": {"conv_channels": [2, 4], "dense_widths": [8, 1], "attention_kernel": 3,
            "input_shape": [16, 16, 16], "flatten_features": null,
            "dropout_conv": 0.0, "dropout_dense": 0.0},
  "train": {"epochs": 300, "learning_rate": 0.01, "loss": "mse", "init_output_bias": false},
  "test_fraction": 0.0
}"#,
    );
    let ck = d.path().join("m.ckpt");
    let o = volage(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck), "--history", s(&d.path().join("h.csv"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = volage(&["eval", "--ckpt", s(&ck), "--data", s(&data)]);
    let mae: f64 = stdout(&o).lines().find_map(|l| l.strip_prefix("mae=")).unwrap().parse().unwrap();
    assert!(mae < 0.1, "mae {mae}");
}

#[test]
fn ablate_reports_delta() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), 10, "16,16,16", 3, "c");
    let cfg = write(d.path(), "tiny.json", TINY);
    let o = volage(&["ablate", "--data", s(&data), "--config", s(&cfg), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let get = |k: &str| -> f64 { out.lines().find_map(|l| l.strip_prefix(k)).unwrap().parse().unwrap() };
    let delta = get("delta_mae=");
    assert!((delta - (get("shared_mae=") - get("per_layer_mae="))).abs() < 2e-4, "{out}");
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![2, 4],
        dense_widths: vec![8, 1],
        attention_kernel: 3,
        input_shape: [16, 16, 16],
        flatten_features: None,
        ..ModelConfig::default()
    }
}

fn pgm_pixels(path: &Path) -> (String, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    // header is three newline-terminated fields
    let mut nl = 0;
    let mut at = 0;
    while nl < 3 {
        if bytes[at] == b'\n' {
            nl += 1;
        }
        at += 1;
    }
    (String::from_utf8(bytes[..at].to_vec()).unwrap(), bytes[at..].to_vec())
}

#[test]
fn gradcam_writes_three_slices() {
    let d = tempfile::tempdir().unwrap();
    let data = synth(d.path(), 2, "16,16,16", 1, "c");
    let vol = d.path().join(&load_manifest(&data).unwrap().rows[0].path);
    let cfg = tiny_model_config();
    let doc = CheckpointDoc {
        model: cfg.clone(),
        normalize_inputs: true,
        trained_on: "c".into(),
    };

    let live = BrainAgeModel::build(&cfg, 2).unwrap();
    let ck = d.path().join("live.ckpt");
    save_checkpoint(&ck, &live, &doc).unwrap();
    let out = d.path().join("cam");
    let o = volage(&["gradcam", "--ckpt", s(&ck), "--volume", s(&vol), "--layer", "2", "--out", s(&out), "--csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for plane in ["sagittal", "coronal", "axial"] {
        let (header, px) = pgm_pixels(&out.join(format!("layer2_{plane}.pgm")));
        assert_eq!(header, "P5\n16 16\n255\n");
        assert_eq!(px.len(), 256);
    }
    let csv = std::fs::read_to_string(out.join("layer2_heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16 * 16 * 16);

    let mut dead = live;
    for layer in &mut dead.dense {
        layer.weight = Tensor::zeros(layer.weight.shape());
    }
    let ck = d.path().join("dead.ckpt");
    save_checkpoint(&ck, &dead, &doc).unwrap();
    let out = d.path().join("black");
    let o = volage(&["gradcam", "--ckpt", s(&ck), "--volume", s(&vol), "--layer", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for plane in ["sagittal", "coronal", "axial"] {
        let (_, px) = pgm_pixels(&out.join(format!("layer1_{plane}.pgm")));
        assert!(px.iter().all(|&p| p == 0), "{plane}");
    }

    let o = volage(&["gradcam", "--ckpt", s(&ck), "--volume", s(&vol), "--layer", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_lists_flags_with_defaults() {
    for (sub, flags) in [
        ("synth", &["--out", "--n", "--shape", "--age-range", "--noise", "--seed"][..]),
        ("train", &["--data", "--config", "--out", "--history", "--epochs", "--lr", "--seed"]),
        ("eval", &["--ckpt", "--data", "--json"]),
        ("crosseval", &["--ckpt", "--data"]),
        ("params", &["--config", "--attention"]),
        ("ablate", &["--data", "--config"]),
        ("gradcam", &["--ckpt", "--volume", "--layer", "--out", "--target"]),
    ] {
        let o = volage(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{sub} help lacks {f}");
        }
        assert!(text.contains("default"), "{sub} help shows no defaults");
    }
}
