//! End-to-end tests of the `aissm` binary: every subcommand, the exit-code
//! contract, and the bit-reproducibility guarantees (identical reruns,
//! resume-equals-straight-run).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aissm")
}

/// Fresh per-test scratch directory.
fn scratch(name: &str) -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if p.exists() {
        fs::remove_dir_all(&p).unwrap();
    }
    fs::create_dir_all(&p).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast dataset: 3 sequences of 4 s on a 16x12 sensor.
fn gen_data(dir: &Path, seed: u64) {
    let seed = format!("seed={seed}");
    run_ok(&[
        "gen",
        "--out",
        path(dir),
        "--set",
        "width=16",
        "--set",
        "height=12",
        "--set",
        "n_sequences=3",
        "--set",
        "duration_s=4",
        "--set",
        "pupil_radius_px=2",
        "--set",
        &seed,
    ]);
}

/// Train a deliberately tiny model (1234 parameters, hence the budget).
fn train(data: &Path, out: &Path, epochs: usize, extra: &[&str]) -> String {
    let epochs = format!("epochs={epochs}");
    let mut args = vec![
        "train",
        "--data",
        path(data),
        "--out",
        path(out),
        "--set",
        "n_vars=2",
        "--set",
        "n_classes=3",
        "--set",
        "d_r=4",
        "--set",
        "conv_channels=2,3",
        "--set",
        "mlp_widths=6",
        "--set",
        "param_budget=1200",
        "--set",
        "window_len=4",
        "--set",
        "batch_size=4",
        "--set",
        &epochs,
    ];
    args.extend_from_slice(extra);
    run_ok(&args)
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = scratch("pipeline");
    let data = dir.join("data");
    gen_data(&data, 3);

    let stdout = train(&data, &dir.join("run"), 2, &[]);
    assert!(stdout.contains("1234 parameters"), "got: {stdout}");
    assert!(stdout.contains("epoch 2 val"), "got: {stdout}");
    assert!(dir.join("run/config.txt").exists());
    assert!(dir.join("run/train_log.csv").exists());

    let ckpt = dir.join("run/ckpt.aism");
    let eval_out = dir.join("eval");
    let stdout = run_ok(&[
        "eval",
        "--ckpt",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&eval_out),
        "--set",
        "split=val",
    ]);
    assert!(stdout.contains("\"p10\""), "got: {stdout}");

    // Per-frame records match the frame count the summary reports.
    let frames_line = stdout
        .lines()
        .find(|l| l.contains("\"frames\""))
        .expect("summary has a frame count");
    let n: usize = frames_line
        .trim()
        .trim_start_matches("\"frames\": ")
        .trim_end_matches(',')
        .parse()
        .unwrap();
    let csv = fs::read_to_string(eval_out.join("frames.csv")).unwrap();
    assert_eq!(csv.lines().count(), n + 1, "header plus one row per labeled frame");
    assert!(csv.starts_with(
        "seq,frame_idx,pred_x,pred_y,label_x,label_y,px_dist,hit5,hit10,hit15,event_density\n"
    ));
}

#[test]
fn generation_is_seed_deterministic() {
    let dir = scratch("gen-determinism");
    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    gen_data(&a, 7);
    gen_data(&b, 7);
    gen_data(&c, 8);
    let read = |d: &Path| fs::read(d.join("seq_000/events.csv")).unwrap();
    assert_eq!(read(&a), read(&b), "same seed, same bytes");
    assert_ne!(read(&a), read(&c), "different seed, different stream");
}

#[test]
fn repeated_training_runs_are_bit_identical() {
    let dir = scratch("train-determinism");
    let data = dir.join("data");
    gen_data(&data, 3);
    train(&data, &dir.join("a"), 2, &[]);
    train(&data, &dir.join("b"), 2, &[]);
    for f in ["train_log.csv", "ckpt.aism", "config.txt"] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn resume_matches_straight_run_bitwise() {
    let dir = scratch("resume");
    let data = dir.join("data");
    gen_data(&data, 3);

    train(&data, &dir.join("straight"), 2, &[]);
    train(&data, &dir.join("half"), 1, &[]);
    let half_ckpt = dir.join("half/ckpt.aism");
    run_ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&dir.join("resumed")),
        "--resume",
        path(&half_ckpt),
        "--set",
        "epochs=2",
    ]);

    assert_eq!(
        fs::read(dir.join("straight/ckpt.aism")).unwrap(),
        fs::read(dir.join("resumed/ckpt.aism")).unwrap(),
        "resumed checkpoint drifted from the straight run"
    );

    // Both checkpoints also evaluate identically.
    let eval = |ckpt: &Path| {
        run_ok(&["eval", "--ckpt", path(ckpt), "--data", path(&data), "--set", "split=val"])
    };
    assert_eq!(
        eval(&dir.join("straight/ckpt.aism")),
        eval(&dir.join("resumed/ckpt.aism"))
    );
}

#[test]
fn confidence_emits_component_csvs() {
    let dir = scratch("confidence");
    let data = dir.join("data");
    gen_data(&data, 3);

    run_ok(&["confidence", "--data", path(&data), "--out", path(&dir.join("conf"))]);
    let csv = fs::read_to_string(dir.join("conf/alpha_000.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame_idx,t_end,snr,ed,alpha"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for row in &rows {
        let alpha: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&alpha), "alpha out of range in {row}");
    }

    // With beta = 1 the label is exactly the SNR column.
    run_ok(&[
        "confidence",
        "--data",
        path(&data),
        "--out",
        path(&dir.join("conf-snr")),
        "--set",
        "beta=1.0",
    ]);
    let csv = fs::read_to_string(dir.join("conf-snr/alpha_000.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[2], cols[4], "beta=1 must copy snr into alpha: {row}");
    }
}

#[test]
fn gradcheck_passes_and_prints_report() {
    let stdout = run_ok(&["gradcheck", "--set", "seeds=1"]);
    assert!(stdout.contains("model/assembled_step"), "got: {stdout}");
    assert!(stdout.contains("all gradient checks passed"), "got: {stdout}");
}

#[test]
fn inspect_reports_checkpoint_layout() {
    let dir = scratch("inspect");
    let data = dir.join("data");
    gen_data(&data, 3);
    train(&data, &dir.join("run"), 1, &[]);

    let stdout = run_ok(&["inspect-ckpt", "--ckpt", path(&dir.join("run/ckpt.aism"))]);
    assert!(stdout.contains("version = 1"));
    assert!(stdout.contains("parameter_values = 1234"));
    assert!(stdout.contains("model = aissm"));
    assert!(stdout.contains("epochs_done = 1"));
}

#[test]
fn exit_codes_identify_failure_classes() {
    let dir = scratch("exit-codes");
    let data = dir.join("data");
    gen_data(&data, 3);
    let out = dir.join("out");

    // 2: config errors — unknown key, bad value, zero sequences, over-budget.
    assert_eq!(
        exit_code(&["train", "--data", path(&data), "--out", path(&out), "--set", "typo=1"]),
        2
    );
    assert_eq!(exit_code(&["gen", "--out", path(&out), "--set", "n_sequences=0"]), 2);
    assert_eq!(
        exit_code(&["gen", "--out", path(&out), "--set", "n_sequences=abc"]),
        2
    );
    // Default (500k-parameter) architecture on a 16x12 sensor misses budget.
    assert_eq!(exit_code(&["train", "--data", path(&data), "--out", path(&out)]), 2);

    // 5: missing artifacts.
    assert_eq!(
        exit_code(&["eval", "--ckpt", path(&dir.join("no.aism")), "--data", path(&data)]),
        5
    );
    assert_eq!(
        exit_code(&["train", "--data", path(&dir.join("nodir")), "--out", path(&out)]),
        5
    );

    // 4: corrupt checkpoint.
    let bad = dir.join("bad.aism");
    fs::write(&bad, b"JUNKJUNKJUNK").unwrap();
    assert_eq!(exit_code(&["inspect-ckpt", "--ckpt", path(&bad)]), 4);

    // 2: resume accepts only the epochs override.
    train(&data, &dir.join("run"), 1, &[]);
    assert_eq!(
        exit_code(&[
            "train",
            "--data",
            path(&data),
            "--out",
            path(&out),
            "--resume",
            path(&dir.join("run/ckpt.aism")),
            "--set",
            "lr=0.5",
        ]),
        2
    );
}
