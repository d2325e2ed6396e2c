// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `spd` binary on tiny configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spd_core::checkpoint::{target_from_checkpoint, Checkpoint};
use spd_core::config::ExperimentConfig;
use spd_core::experiment::{preset, RunManifest};

fn spd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spd"))
        .args(args)
        .output()
        .expect("spawn spd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny() -> ExperimentConfig {
    let mut cfg = preset("tms_5_2").unwrap();
    cfg.name = "tiny".into();
    cfg.seeds = vec![4];
    cfg.target.steps = 50;
    cfg.target.batch_size = 64;
    cfg.target.loss_ceiling = None;
    cfg.spd.n_subcomponents = 6;
    cfg.spd.d_gate = 4;
    cfg.spd.steps = 20;
    cfg.spd.batch_size = 32;
    cfg.eval.batch_size = 64;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{}.toml", cfg.name));
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn train_decompose_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();

    let r = spd(&[
        "train-target",
        "--config",
        cfg,
        "--out",
        o,
        "--progress-every",
        "0",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(out.join("target.ckpt").is_file() && out.join("target_loss.csv").is_file());
    let curve = std::fs::read_to_string(out.join("target_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 51);

    let target = out.join("target.ckpt");
    let r = spd(&[
        "decompose",
        "--config",
        cfg,
        "--target",
        target.to_str().unwrap(),
        "--out",
        o,
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let losses = std::fs::read_to_string(out.join("spd_loss.csv")).unwrap();
    assert!(losses.starts_with("step,faithfulness,stochastic_recon,layerwise,importance,total\n"));
    assert_eq!(losses.lines().count(), 21);

    let ev = dir.path().join("eval");
    let r = spd(&[
        "evaluate",
        "--spd",
        out.join("spd.ckpt").to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let report: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(report["name"], "tiny");
    assert_eq!(report["seed"], 4);
    for f in [
        "report.json",
        "metrics.csv",
        "heatmap_W.csv",
        "heatmap_W.svg",
    ] {
        assert!(ev.join(f).is_file(), "{f}");
    }
}

#[test]
fn zero_step_target_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.target.steps = 0;
    let cfg = write_config(dir.path(), &c);
    let r = spd(&[
        "train-target",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let model = target_from_checkpoint(&Checkpoint::load(&dir.path().join("target.ckpt")).unwrap())
        .unwrap();
    assert_eq!(model, c.model.build(4));
}

#[test]
fn config_errors_exit_1_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny()
        .to_toml_string()
        .unwrap()
        .replace("beta3 = 0.003", "beta3 = -1.0");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let r = spd(&[
        "train-target",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("spd.beta3"), "{}", stderr(&r));

    let r = spd(&["train-target", "--config", "no_such_preset"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(
        stderr(&r).contains("tms_5_2"),
        "lists presets: {}",
        stderr(&r)
    );
}

#[test]
fn unknown_suite_lists_valid_ones() {
    let r = spd(&["reproduce", "bogus"]);
    assert_eq!(r.status.code(), Some(1));
    let e = stderr(&r);
    for s in [
        "tms", "tms_id", "resid1", "resid2", "resid3", "all", "quick",
    ] {
        assert!(e.contains(s), "{e}");
    }
}

#[test]
fn divergence_exits_2_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.spd.optimizer.lr = 1e300;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    let r = spd(&[
        "decompose",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));
    assert!(stderr(&r).contains("numerical"), "{}", stderr(&r));
    let ck = Checkpoint::load(&out.join("spd.ckpt")).unwrap();
    assert!(ck.tensors.iter().all(|(_, t)| t.is_finite()));

    let mut c = tiny();
    c.target.optimizer.lr = 1e300;
    let cfg = write_config(dir.path(), &c);
    let r = spd(&[
        "train-target",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));
    assert!(out.join("target_loss.csv").is_file());
}

#[test]
fn partial_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.spd.optimizer.lr = 1e300;
    let cfg = write_config(dir.path(), &c);
    let r = spd(&[
        "reproduce",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let r = spd(&[
            "reproduce",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--deterministic",
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
        out.join("tiny").join("seed_4")
    };
    let a = run("a");
    let b = run("b");
    let manifest = RunManifest::load(&a).unwrap();
    manifest.verify(&a).unwrap();
    assert!(manifest.files().any(|f| f.path == "spd.ckpt"));
    assert!(manifest.files().any(|f| f.path == "report.json"));
    for f in manifest
        .files()
        .map(|f| f.path.clone())
        .chain(["manifest.json".to_string()])
    {
        assert_eq!(
            std::fs::read(a.join(&f)).unwrap(),
            std::fs::read(b.join(&f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn presets_subcommand_lists_presets() {
    let r = spd(&["presets"]);
    assert!(r.status.success());
    let s = String::from_utf8(r.stdout).unwrap();
    assert!(s.lines().any(|l| l == "resid_mlp_3layer"));
}
