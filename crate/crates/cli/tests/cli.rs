use std::path::Path;
use std::process::{Command, Output};

fn framewalk(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_framewalk"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn help_lists_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = framewalk(&["--help"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train-frames", "train-video", "sample", "sample-video", "eval-mse", "eval-isomap", "exp1", "exp2"] {
        assert!(text.contains(sub), "missing {sub} in help:\n{text}");
    }
}

#[test]
fn gen_data_then_real_mse() {
    let tmp = tempfile::tempdir().unwrap();
    let out = framewalk(&["gen-data", "--clips", "6", "--frames", "10", "--balls", "2", "--seed", "3", "--out", "d.bin"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let len = std::fs::metadata(tmp.path().join("d.bin")).unwrap().len();
    assert_eq!(len, 36 + 6 * 10 * 32 * 32);
    assert!(tmp.path().join("d.index").exists());
    assert!(tmp.path().join("d.json").exists());

    let out = framewalk(&["eval-mse", "--condition", "real", "--n", "4", "--balls", "2", "--out", "mse.csv"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("mse.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "condition,n_videos,mean,std");
    assert!(lines[1].starts_with("real,4,"));
}

#[test]
fn model_conditions_need_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = framewalk(&["eval-mse", "--condition", "proposed", "--out", "m.csv"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--video-ckpt"));
    let out = framewalk(&["eval-mse", "--condition", "random", "--out", "m.csv"], tmp.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frame-ckpt"));
    let out = framewalk(&["sample", "--ckpt", "missing", "--grid", "g.png"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn unknown_preset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = framewalk(&["exp1", "--preset", "huge", "--run-dir", "r"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}
