use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn regmz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regmz"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = regmz(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A small toy experiment: 500 training and 50 test trajectories.
fn small_toy(dir: &Path) -> PathBuf {
    let p = dir.join("toy.toml");
    std::fs::write(
        &p,
        "preset = \"toy\"\n\
         [data.train]\nn_trajectories = 500\n\
         [data.test]\nn_trajectories = 50\n\
         [evaluation]\nn_rollouts = 50\n",
    )
    .unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn stages_run_one_after_another() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(dir.path());
    let (data, model, pred, eval) = (
        dir.path().join("data"),
        dir.path().join("model"),
        dir.path().join("pred"),
        dir.path().join("eval"),
    );
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert!(data.join("train_mono2c_x0.mzdm").exists());
    assert!(data.join("test_raw_0.mzdm").exists());
    let out = ok(&[
        "learn",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        "mori2",
        "--out",
        s(&model),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mori2: H = 1"));
    assert!(model.join("diagnostics.csv").exists());
    ok(&[
        "predict",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model-dir",
        s(&model),
        "--out",
        s(&pred),
    ]);
    ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--predictions",
        s(&pred),
        "--out",
        s(&eval),
    ]);
    let mse = csv_rows(&eval.join("toy_mori2_mse.csv"));
    assert_eq!(mse.len(), 60);
    assert!(mse.iter().all(|r| r[1].is_finite() && r[1] < 1e-3));
    // Every table starts with the config hash.
    let first = std::fs::read_to_string(eval.join("toy_mori2_mse.csv")).unwrap();
    assert!(first.starts_with("# config_hash="));

    // A prediction equal to the truth scores exactly zero.
    for ext in ["mzdm", "mzdm.meta.toml"] {
        std::fs::copy(
            pred.join(format!("pred_truth.{ext}")),
            pred.join(format!("pred.{ext}")),
        )
        .unwrap();
    }
    let eval2 = dir.path().join("eval2");
    ok(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--predictions",
        s(&pred),
        "--out",
        s(&eval2),
    ]);
    assert!(csv_rows(&eval2.join("toy_mori2_mse.csv"))
        .iter()
        .all(|r| r[1] == 0.0));
}

#[test]
fn markov_only_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(dir.path());
    let (data, model, pred) = (
        dir.path().join("d"),
        dir.path().join("m"),
        dir.path().join("p"),
    );
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&[
        "learn",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model",
        "poly2",
        "--out",
        s(&model),
    ]);
    ok(&[
        "predict",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--model-dir",
        s(&model),
        "--out",
        s(&pred),
        "--markov-only",
    ]);
    let summary = std::fs::read_to_string(pred.join("predict_summary.toml")).unwrap();
    assert!(summary.contains("mode = \"markov_only\""), "{summary}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "preset = \"toy\"\n[evaluation]\nhorizon_step = 5\n").unwrap();
    let out = regmz(&[
        "generate",
        "--config",
        s(&p),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon_step"));
}

#[test]
fn mismatched_data_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(dir.path());
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    let model = dir.path().join("model");
    let learn = |extra: &[&str]| {
        let mut args = vec![
            "learn",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--model",
            "mori2",
            "--seed",
            "1",
        ];
        args.extend(["--out", s(&model)]);
        args.extend(extra);
        regmz(&args)
    };
    let out = learn(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_hash"));
    assert!(learn(&["--force"]).status.success());

    // Existing output is not overwritten without --force either.
    let out = regmz(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn van_der_pol_order5_prediction_stays_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vdp.toml");
    std::fs::write(&p, "preset = \"vdp\"\nrun_models = [\"poly5\"]\n").unwrap();
    let out = dir.path().join("run");
    ok(&["reproduce", "vdp", "--config", s(&p), "--out", s(&out)]);
    let rows = csv_rows(&out.join("predictions/poly5/trajectory.csv"));
    assert_eq!(rows.len(), 280);
    assert!((rows[0][0] - 120.5).abs() < 1e-9);
    assert!((rows[279][0] - 260.0).abs() < 1e-9);
    assert!(rows.iter().all(|r| r[1].abs() < 3.0));
}
