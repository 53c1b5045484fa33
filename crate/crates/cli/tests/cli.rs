use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_webctx"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn help_lists_subcommands_and_global_flags() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "ingest",
        "synth",
        "build-graph",
        "train",
        "eval",
        "predict",
        "viz",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    for flag in ["--seed", "--config", "--workdir"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let o = run(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--data",
        "--out",
        "--folds",
        "--k",
        "--max-epochs",
        "--seed",
    ] {
        assert!(text.contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&run(&["train", "--out", "x"])), 1);
    assert_eq!(code(&run(&[])), 1);
}

#[test]
fn invalid_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&[
        "--workdir",
        d,
        "ingest",
        "--data",
        "missing.csv",
        "--out",
        "r.json",
    ]);
    assert_eq!(code(&o), 1);
    std::fs::write(
        dir.path().join("bad.toml"),
        "n_pages = 3\nelements_per_page = 2\n",
    )
    .unwrap();
    assert_eq!(
        code(&run(&[
            "--workdir",
            d,
            "synth",
            "--spec",
            "bad.toml",
            "--out",
            "s"
        ])),
        1
    );
    std::fs::write(dir.path().join("typo.toml"), "n_pagez = 3\n").unwrap();
    assert_eq!(
        code(&run(&[
            "--workdir",
            d,
            "synth",
            "--spec",
            "typo.toml",
            "--out",
            "s"
        ])),
        1
    );
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "stamp.json" {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let spec = configs().join("tiny_synth.toml");
    let train_cfg = configs().join("tiny_train.toml");
    let ok = |args: &[&str]| {
        let o = run(args);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    ok(&[
        "--workdir",
        d,
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        "data",
    ]);
    ok(&[
        "--workdir",
        d,
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        "data2",
    ]);
    assert_eq!(
        files_under(&dir.path().join("data")),
        files_under(&dir.path().join("data2"))
    );

    let manifest = "data/manifest.csv";
    ok(&[
        "--workdir",
        d,
        "--config",
        train_cfg.to_str().unwrap(),
        "train",
        "--data",
        manifest,
        "--n-folds",
        "3",
        "--out",
        "run",
    ]);
    for f in [
        "fold_0.safetensors",
        "fold_1.safetensors",
        "fold_2.safetensors",
        "folds.json",
        "train_log.jsonl",
        "stamp.json",
    ] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let stamp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/stamp.json")).unwrap())
            .unwrap();
    assert_eq!(stamp["config"]["k"], 8);
    assert_eq!(stamp["dataset_sha256"].as_str().unwrap().len(), 64);
    let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    ok(&[
        "--workdir",
        d,
        "eval",
        "--data",
        manifest,
        "--ckpt",
        "run",
        "--out",
        "eval.json",
    ]);
    ok(&[
        "--workdir",
        d,
        "eval",
        "--data",
        manifest,
        "--ckpt",
        "run",
        "--out",
        "eval2.json",
    ]);
    let a = std::fs::read(dir.path().join("eval.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("eval2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    for key in ["price", "title", "image", "mean"] {
        let m = report["mean"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
        assert!(report["std"][key].as_f64().unwrap() >= 0.0);
    }

    ok(&[
        "--workdir",
        d,
        "predict",
        "--data",
        manifest,
        "--ckpt",
        "run/fold_0.safetensors",
        "--out",
        "pred.json",
    ]);
    let preds: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("pred.json")).unwrap()).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 12);
    ok(&[
        "--workdir",
        d,
        "build-graph",
        "--data",
        manifest,
        "--page",
        "page00000",
        "--k",
        "3",
        "--out",
        "g.json",
    ]);
    ok(&[
        "--workdir",
        d,
        "ingest",
        "--data",
        manifest,
        "--out",
        "ingest.json",
    ]);
    let title = preds[0]["title_id"].as_u64().unwrap().to_string();
    ok(&[
        "--workdir",
        d,
        "viz",
        "--data",
        manifest,
        "--ckpt",
        "run/fold_0.safetensors",
        "--page",
        "page00000",
        "--element",
        &title,
        "--out",
        "viz/a.png",
    ]);
    assert!(dir.path().join("viz/a.png").exists() && dir.path().join("viz/a.json").exists());
    let o = run(&[
        "--workdir",
        d,
        "viz",
        "--data",
        manifest,
        "--ckpt",
        "run/fold_0.safetensors",
        "--page",
        "page00000",
        "--element",
        "99999",
        "--out",
        "viz/b.png",
    ]);
    assert_eq!(code(&o), 1);
    let o = run(&[
        "--workdir",
        d,
        "build-graph",
        "--data",
        manifest,
        "--page",
        "nope",
        "--out",
        "g.json",
    ]);
    assert_eq!(code(&o), 1);
}
