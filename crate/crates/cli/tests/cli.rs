use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};

fn ctxpose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxpose"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = ctxpose(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn small_synth(n_samples: usize) -> Value {
    json!({
        "n_samples": n_samples,
        "skeleton": {"kind": "chain", "n_joints": 3, "length_mm": 40.0},
        "grid": {"dims": [5, 5, 5], "spacing_mm": [30.0, 30.0, 30.0], "center_mm": [0.0, 0.0, 0.0]},
        "channels": 2
    })
}

#[test]
fn generate_writes_volumes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "c.json", &json!({ "synth": small_synth(4) }));
    let s = ok(d, &["--config", "c.json", "--out", "a", "generate"]);
    assert_eq!(s["samples"], 4);
    let vols = std::fs::read_dir(d.join("a"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "vol"))
        .count();
    assert_eq!(vols, 4);
    assert!(d.join("a/manifest.json").exists());

    ok(d, &["--config", "c.json", "--out", "b", "generate"]);
    for e in std::fs::read_dir(d.join("a")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(d.join("a").join(&name)).unwrap(), std::fs::read(d.join("b").join(&name)).unwrap());
    }
    ok(d, &["--config", "c.json", "--seed", "1", "--out", "c", "generate"]);
    assert_ne!(std::fs::read(d.join("a/poses.csv")).unwrap(), std::fs::read(d.join("c/poses.csv")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "missing.json", &json!({
        "synth": {"skeleton": {"kind": "file", "path": "no_such_skeleton.json"}},
        "out": "x"
    }));
    let out = ctxpose(d, &["--config", "missing.json", "generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_skeleton.json"));

    write_config(d, "typo.json", &json!({ "train": {"learning_rate": 0.1} }));
    assert_eq!(ctxpose(d, &["--config", "typo.json", "--out", "x", "train"]).status.code(), Some(2));
    write_config(d, "psm.json", &json!({ "method": "psm", "synth": small_synth(4) }));
    assert_eq!(ctxpose(d, &["--config", "psm.json", "--out", "x", "train"]).status.code(), Some(2));
}

#[test]
fn psm_noiseless_is_within_quantization_and_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut synth = small_synth(6);
    synth["unary_noise"] = json!(0.0);
    synth["angle_range_deg"] = json!(10.0);
    // 64³ assignments: small enough for the exhaustive oracle
    synth["grid"] = json!({"dims": [4, 4, 4], "spacing_mm": [40.0, 40.0, 40.0], "center_mm": [0.0, 0.0, 0.0]});
    write_config(d, "c.json", &json!({ "synth": synth }));
    ok(d, &["--config", "c.json", "--out", "data", "generate"]);
    write_config(d, "e.json", &json!({ "dataset": "data" }));
    // a window of one full diagonal admits every true voxel pair
    let diag = (3.0f64 * 40.0 * 40.0).sqrt();
    ok(d, &["--config", "e.json", "--out", "psm", "infer-psm", "--epsilon", &format!("{}", diag + 1e-6), "--oracle"]);
    let v = read_json(d.join("psm/psm.json"));
    for s in v["samples"].as_array().unwrap() {
        assert!(s["mean_joint_error"].as_f64().unwrap() <= 0.5 * diag + 1e-9);
    }
    assert_eq!(v["oracle"]["disagreements"], 0);
    assert_eq!(v["oracle"]["skipped"], 0);
    assert_eq!(v["oracle"]["checked"], 6);

    // the single-volume form
    let sk = json!({"n_joints": 3, "edges": [[0, 1], [1, 2]],
                    "priors": [{"u": 0, "v": 1, "mu": 40.0, "sigma": 1.0}, {"u": 1, "v": 2, "mu": 40.0, "sigma": 1.0}]});
    write_config(d, "sk.json", &sk);
    let v = ok(d, &["--out", "one", "psm-infer", "--unary", "data/sample_00000.vol", "--skeleton", "sk.json"]);
    assert_eq!(v["assignment"].as_array().unwrap().len(), 3);
    assert_eq!(read_json(d.join("one/psm.json")), v);
}

#[test]
fn cyclic_skeleton_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "c.json", &json!({ "synth": small_synth(2) }));
    write_config(d, "cyc.json", &json!({"n_joints": 3, "edges": [[0, 1], [1, 2], [2, 0]]}));
    let out = ctxpose(d, &["--config", "c.json", "--out", "p", "infer-psm", "--skeleton", "cyc.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_config(d: &Path, name: &str, method: &str, extra: Value) -> PathBuf {
    let mut synth = small_synth(8);
    synth["occlusion_prob"] = json!(0.3);
    synth["test_fraction"] = json!(0.5);
    let mut v = json!({
        "method": method,
        "synth": synth,
        "train": {"lr": 0.01, "epochs": 2, "batch": 2, "checkpoint_every": 1}
    });
    if let Value::Object(m) = extra {
        for (k, x) in m {
            v[k] = x;
        }
    }
    write_config(d, name, &v)
}

fn log_lines(p: impl AsRef<Path>) -> Vec<Value> {
    std::fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn train_logs_resumes_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train_config(d, "c.json", "contextpose", json!({}));
    let t0 = Instant::now();
    ok(d, &["--config", "c.json", "--out", "run", "train"]);
    assert!(t0.elapsed().as_secs() < 60);
    for f in ["log.jsonl", "model.bin", "checkpoint-0001.bin", "checkpoint-0002.bin", "predictions.csv", "metrics.json", "samples.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = log_lines(d.join("run/log.jsonl"));
    assert_eq!(log[0]["event"], "start");
    let epochs: Vec<&Value> = log.iter().filter(|l| l["event"] == "epoch").collect();
    assert_eq!(epochs.len(), 2);
    for e in &epochs {
        let (t, l3d, lga) = (e["loss"].as_f64().unwrap(), e["l3d"].as_f64().unwrap(), e["lga"].as_f64().unwrap());
        assert!(lga > 0.0 && (t - (l3d + 1e6 * lga)).abs() <= 1e-9 * t);
        assert!(e["val"]["mplle"].is_number());
    }

    // resuming after epoch 1 lands on the same final model
    ok(d, &["--config", "c.json", "--out", "resumed", "train", "--resume", "run/checkpoint-0001.bin"]);
    assert_eq!(std::fs::read(d.join("run/model.bin")).unwrap(), std::fs::read(d.join("resumed/model.bin")).unwrap());
    assert_eq!(
        std::fs::read(d.join("run/predictions.csv")).unwrap(),
        std::fs::read(d.join("resumed/predictions.csv")).unwrap()
    );

    // eval of a checkpoint reproduces the training run's report
    ok(d, &["--config", "c.json", "--out", "ev", "eval", "--checkpoint", "run/model.bin"]);
    assert_eq!(std::fs::read(d.join("run/samples.csv")).unwrap(), std::fs::read(d.join("ev/samples.csv")).unwrap());

    // a baseline checkpoint cannot resume a contextpose run
    train_config(d, "b.json", "baseline", json!({}));
    ok(d, &["--config", "b.json", "--out", "base", "train"]);
    let out = ctxpose(d, &["--config", "c.json", "--out", "x", "train", "--resume", "base/model.bin"]);
    assert_eq!(out.status.code(), Some(2));

    // compare: candidate minus baseline
    let v = ok(d, &["--config", "c.json", "--out", "cmp", "compare", "--baseline", "base/samples.csv", "--candidate", "run/samples.csv"]);
    let a = read_json(d.join("base/metrics.json"));
    let b = read_json(d.join("run/metrics.json"));
    let want = b["mplle"].as_f64().unwrap() - a["mplle"].as_f64().unwrap();
    assert!((v["mean_d_mplle"].as_f64().unwrap() - want).abs() < 1e-9);
    let dat = std::fs::read_to_string(d.join("cmp/compare.dat")).unwrap();
    assert!(dat.starts_with("# per-sample difference, candidate minus baseline (negative: candidate better)"));
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn lambda_zero_logs_attention_loss_but_excludes_it() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    train_config(d, "c.json", "contextpose", json!({ "loss": {"lambda": 0.0}, "train": {"epochs": 1, "batch": 2} }));
    ok(d, &["--config", "c.json", "--out", "run", "train"]);
    let log = log_lines(d.join("run/log.jsonl"));
    let e = log.iter().find(|l| l["event"] == "epoch").unwrap();
    assert!(e["lga"].as_f64().unwrap() > 0.0);
    assert_eq!(e["loss"], e["l3d"]);
}

#[test]
fn eval_and_compare_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "c.json", &json!({ "synth": small_synth(6) }));
    ok(d, &["--config", "c.json", "--out", "data", "generate"]);
    write_config(d, "e.json", &json!({ "dataset": "data" }));
    let v = ok(d, &["--config", "e.json", "--out", "self", "eval", "--pred", "data/poses.csv", "--gt", "data/poses.csv"]);
    for k in ["mpjpe_p1", "mplle", "mplae"] {
        assert_eq!(v[k].as_f64().unwrap(), 0.0, "{k}");
    }
    // the rigid fit goes through an SVD
    assert!(v["mpjpe_p2"].as_f64().unwrap() < 1e-9);
    assert_eq!(v["pck"].as_f64().unwrap(), 1.0);
    assert_eq!(v["auc"].as_f64().unwrap(), 1.0);

    let v = ok(d, &["--config", "e.json", "--out", "cmp", "compare", "--baseline", "self/samples.csv", "--candidate", "self/samples.csv"]);
    assert_eq!(v["mean_d_mplle"].as_f64().unwrap(), 0.0);
    assert_eq!(v["mean_d_mpjpe_p1"].as_f64().unwrap(), 0.0);

    // prediction set covering the whole dataset vs the held-out ground truth
    let out = ctxpose(d, &["--config", "e.json", "--out", "x", "eval", "--pred", "data/poses.csv"]);
    assert_eq!(out.status.code(), Some(4));
    std::fs::write(d.join("short.csv"), "sample_id,mpjpe_p1,mpjpe_p2,mplle,mplae\n0,1,1,1,1\n").unwrap();
    let out = ctxpose(d, &["--out", "x", "compare", "--baseline", "self/samples.csv", "--candidate", "short.csv"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn refinement_methods_train() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for m in ["fcn", "gnn", "lcn"] {
        train_config(d, "c.json", m, json!({ "train": {"lr": 0.01, "epochs": 1, "batch": 2} }));
        ok(d, &["--config", "c.json", "--out", m, "train"]);
        assert!(d.join(m).join("refine.bin").exists());
        let log = log_lines(d.join(m).join("log.jsonl"));
        assert!(log.iter().any(|l| l["stage"] == "refine"));
    }
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let v = ok(tmp.path(), &["--out", "g", "gradcheck", "--seeds", "10"]);
    assert_eq!(v["pass"], true);
    assert!(tmp.path().join("g/gradcheck.json").exists());
}
