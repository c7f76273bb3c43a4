//! End-to-end exercise of every subcommand against a tiny bundle.

use std::path::{Path, PathBuf};
use std::process::Command;

fn cgrl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cgrl"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_pipeline_smoke() {
    let dir = std::env::temp_dir().join("cgrl_cli_smoke");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    // bench with a small generator config
    let bench_cfg = dir.join("bench.cfg");
    write(
        &bench_cfg,
        "sbm_classes = 3\nsbm_per_class = 12\nsbm_p_in = 0.3\nsbm_p_out = 0.03\nsbm_dim = 8\nsbm_delta = 1.2\nsbm_noise = 0.4\nsbm_seed = 5\n",
    );
    let bench_dir = dir.join("bench");
    let out = cgrl()
        .args(["bench", "--out"])
        .arg(&bench_dir)
        .arg("--config")
        .arg(&bench_cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["manifest.txt", "edges.txt", "labels.txt", "features_id.csv", "train.txt"] {
        assert!(bench_dir.join(file).exists(), "missing {file}");
    }

    // train a short cgrl run
    let train_cfg = dir.join("train.cfg");
    let out_dir = dir.join("out");
    write(
        &train_cfg,
        &format!(
            "model = cgrl-gcn\nepochs = 4\nruns = 2\npairs_per_epoch = 64\nbench_dir = {}\nout_dir = {}\n",
            bench_dir.display(),
            out_dir.display()
        ),
    );
    let out = cgrl()
        .args(["train", "--config"])
        .arg(&train_cfg)
        .args(["--jobs", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("resolved config"), "config not echoed: {stdout}");

    let records: Vec<PathBuf> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().is_some_and(|x| x == "json")).then_some(p)
        })
        .collect();
    assert_eq!(records.len(), 1);

    // plot re-emits byte-identical artifacts
    let replot = dir.join("replot");
    let out = cgrl()
        .args(["plot", "--records"])
        .arg(&records[0])
        .arg("--out")
        .arg(&replot)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for entry in std::fs::read_dir(&replot).unwrap() {
        let replotted = entry.unwrap().path();
        let original = out_dir.join(replotted.file_name().unwrap());
        assert_eq!(
            std::fs::read(&original).unwrap(),
            std::fs::read(&replotted).unwrap(),
            "{replotted:?} differs from the original"
        );
    }

    // sweep a single value
    let out = cgrl()
        .args(["sweep", "--config"])
        .arg(&train_cfg)
        .args(["--axis", "k", "--values", "1,2", "--jobs", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("sweep_k.csv").exists());
    assert!(out_dir.join("sweep_k.svg").exists());

    // verify exits zero on sound theory
    let out = cgrl()
        .args(["verify", "--scm-seeds", "5", "--elbo-seeds", "10", "--t-max", "100"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("all checks passed"));
}

#[test]
fn bad_config_fails_with_diagnostic() {
    let dir = std::env::temp_dir().join("cgrl_cli_bad");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.cfg");
    write(&cfg, "model = cgrl-gcn\nfoo = 1\n");
    let out = cgrl().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));
}
