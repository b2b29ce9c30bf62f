//! Workflow contract of the command-line binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fod")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "\
# desk-size smoke configuration
image_size = 32
train_images = 4
test_normal = 3
test_anomalous = 3
feature_dim = 8
d_model = 8
heads = 2
layers = 2
epochs = 2
lr = 0.001
seed = 11
",
    )
    .unwrap();
    path
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fod_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn full_pipeline_completes_with_parseable_deterministic_eval_line() {
    let dir = workdir("pipeline");
    let cfg = tiny_config(&dir);
    let cfg = cfg.to_str().unwrap();
    let data = dir.join("data");
    let run_dir = dir.join("run");

    let out = run(&["gen", "--config", cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "gen failed: {out:?}");
    assert!(data.join("train/img_0000.fodt").exists());
    assert!(data.join("test/labels.csv").exists());

    let out = run(&[
        "train",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {out:?}");
    assert!(run_dir.join("model.fodt").exists());
    assert!(run_dir.join("bank.fodt").exists());
    let loss_csv = fs::read_to_string(run_dir.join("loss_8x.csv")).unwrap();
    assert!(loss_csv.starts_with("epoch,l_rec,div_g,div_e,ent_g,ent_e"));
    assert_eq!(loss_csv.lines().count(), 3, "header plus one row per epoch");

    let eval_args = [
        "eval",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--run",
        run_dir.to_str().unwrap(),
    ];
    let out1 = run(&eval_args);
    assert!(out1.status.success(), "eval failed: {out1:?}");
    let text = String::from_utf8(out1.stdout).unwrap();
    let last = text.lines().last().unwrap().to_string();
    assert!(last.starts_with("image_auroc="), "final line: {last}");
    let mut parts = last.split_whitespace();
    let img: f64 = parts
        .next()
        .unwrap()
        .strip_prefix("image_auroc=")
        .unwrap()
        .parse()
        .unwrap();
    let pix: f64 = parts
        .next()
        .unwrap()
        .strip_prefix("pixel_auroc=")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&img));
    assert!((0.0..=1.0).contains(&pix));

    // Determinism: the same artifacts evaluate to identical lines.
    let out2 = run(&eval_args);
    let text2 = String::from_utf8(out2.stdout).unwrap();
    assert_eq!(last, text2.lines().last().unwrap());

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn build_bank_then_train_with_bank_file() {
    let dir = workdir("bank");
    let cfg = tiny_config(&dir);
    let cfg = cfg.to_str().unwrap();
    let data = dir.join("data");
    run(&["gen", "--config", cfg, "--out", data.to_str().unwrap()]);

    let bank_dir = dir.join("banks");
    let out = run(&[
        "build-bank",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        bank_dir.to_str().unwrap(),
        "--bank",
        "coreset",
    ]);
    assert!(out.status.success(), "build-bank failed: {out:?}");
    let bank_file = bank_dir.join("bank.fodt");
    assert!(bank_file.exists());

    let run_dir = dir.join("run");
    let out = run(&[
        "train",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--bank-file",
        bank_file.to_str().unwrap(),
        "--opt",
        "direct",
        "--entropy",
        "off",
    ]);
    assert!(out.status.success(), "train failed: {out:?}");

    let score_dir = dir.join("scores");
    let out = run(&[
        "score",
        "--config",
        cfg,
        "--data",
        data.to_str().unwrap(),
        "--run",
        run_dir.to_str().unwrap(),
        "--out",
        score_dir.to_str().unwrap(),
        "--criterion",
        "rec",
    ]);
    assert!(out.status.success(), "score failed: {out:?}");
    let scores = fs::read_to_string(score_dir.join("scores.csv")).unwrap();
    assert!(scores.starts_with("id,label,score"));
    assert!(scores.lines().last().unwrap().starts_with("# image_auroc="));
    assert!(score_dir.join("maps.fodt").exists());

    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn ablate_writes_one_row_per_grid_cell() {
    let dir = workdir("ablate");
    let cfg_path = dir.join("ablate.cfg");
    fs::write(
        &cfg_path,
        "\
image_size = 32
train_images = 3
test_normal = 2
test_anomalous = 2
feature_dim = 8
d_model = 8
heads = 2
layers = 1
epochs = 1
seed = 3
ablate_banks = mean,coreset
ablate_criteria = rec,recdiv
ablate_entropy = on
ablate_opts = two-phase
",
    )
    .unwrap();
    let data = dir.join("data");
    run(&["gen", "--config", cfg_path.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let csv_path = dir.join("grid.csv");
    let out = run(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "ablate failed: {out:?}");
    let text = fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "views,entropy,bank,opt,criterion,image_auroc,pixel_auroc");
    assert_eq!(rows.len() - 1, 2 * 1 * 1 * 2, "banks x entropy x opts x criteria");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen", "--config", "x.cfg", "--out", "y", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_single_line_and_exit_one() {
    let dir = workdir("errors");
    let bad_cfg = dir.join("bad.cfg");
    fs::write(&bad_cfg, "no_such_knob = 1\n").unwrap();
    let out = run(&[
        "gen",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        dir.join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "machine-parseable single line: {err}");
    assert!(err.starts_with("error:"));
    fs::remove_dir_all(&dir).unwrap();
}
