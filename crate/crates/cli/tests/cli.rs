//! End-to-end runs of the binary: outputs on disk and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgbd-fusion"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL: [&str; 8] = ["--input-size", "32", "--channels", "8", "--t", "2", "--iters", "2"];

#[test]
fn gen_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["gen-data", "--out", "data", "--input-size", "32"])), 0);
    assert!(d.join("data/train/0127_gt.pgm").exists());
    assert!(d.join("data/test/0031_rgb.ppm").exists());

    let mut args = vec!["train", "--data", "data", "--out", "run"];
    args.extend(SMALL);
    let out = run(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(log.starts_with("iter,l_init,l_final,total\n"));
    assert_eq!(log.lines().count(), 3);

    args[0] = "eval";
    args.push("--dump-maps");
    let out = run(d, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("MAE   F_m   S_m   E_m"));
    assert!(std::fs::read_to_string(d.join("run/metrics_test.csv"))
        .unwrap()
        .starts_with("dataset,mae,fm,sm,em\n"));
    assert!(d.join("run/maps/0000_pred.pgm").exists());

    let mut infer = vec![
        "infer",
        "--out",
        "run",
        "--rgb",
        "data/test/0000_rgb.ppm",
        "--depth",
        "data/test/0000_depth.pgm",
        "--output",
        "one.pgm",
    ];
    infer.extend(SMALL);
    assert_eq!(code(&run(d, &infer)), 0);
    assert_eq!(
        std::fs::read(d.join("one.pgm")).unwrap(),
        std::fs::read(d.join("run/maps/0000_pred.pgm")).unwrap()
    );
}

#[test]
fn checkpoint_for_another_config_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--out", "run", "--iters", "1"];
    args.extend(&SMALL[..6]);
    assert_eq!(code(&run(d, &args)), 0);
    let out = run(
        d,
        &[
            "eval",
            "--out",
            "run",
            "--input-size",
            "32",
            "--channels",
            "8",
            "--t",
            "3",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("version mismatch"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["train", "--bogus"])), 1);
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    std::fs::write(d.join("bad.cfg"), "chanels = 3\n").unwrap();
    let out = run(d, &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key \"chanels\""));
    assert_eq!(code(&run(d, &["train", "--channels", "30"])), 1);
    assert_eq!(code(&run(d, &["--help"])), 0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.cfg"),
        "# tiny run\ninput_size = 32\nchannels = 8\nt = 2\niters = 5\n",
    )
    .unwrap();
    let out = run(d, &["train", "--config", "run.cfg", "--iters", "1", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(d.join("run/loss.csv")).unwrap().lines().count(),
        2
    );
}

#[test]
fn missing_input_file_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--checkpoint", "nope.ckpt"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let report = String::from_utf8_lossy(&ok.stdout);
    assert!(report.lines().filter(|l| l.ends_with("PASS")).count() >= 12);

    let bad = run(dir.path(), &["gradcheck", "--inject-fault", "softmax-sign"]);
    assert_eq!(code(&bad), 2);
    let report = String::from_utf8_lossy(&bad.stdout);
    assert!(report
        .lines()
        .any(|l| l.starts_with("softmax_rows") && l.ends_with("FAIL")));
}

#[test]
fn bench_attn_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["bench-attn", "--n", "64,128", "--reps", "1"]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,c,ea_ms,dpa_ms,ea_max_buffer,dpa_max_buffer");
    assert!(lines[1].starts_with("64,32,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn baseline_flag_trains_and_excludes_non_progressive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--baseline-msmmf", "--out", "run"];
    args.extend(&SMALL[..4]);
    args.extend(["--iters", "1"]);
    assert_eq!(code(&run(d, &args)), 0);
    assert!(d.join("run/model.ckpt").exists());
    assert_eq!(code(&run(d, &["train", "--baseline-msmmf", "--non-progressive"])), 1);
}
