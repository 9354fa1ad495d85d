//! End-to-end tests of the `mstr` binary.

use std::path::Path;
use std::process::{Command, Output};

fn mstr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny-but-trainable settings shared by the pipeline tests.
fn tiny_sets(data_dir: &Path) -> Vec<String> {
    [
        format!("data_dir={}", data_dir.display()),
        "input_dim=4".into(),
        "model_dim=8".into(),
        "fractal_p=3".into(),
        "scale_levels=2".into(),
        "heads=2".into(),
        "blocks=1".into(),
        "num_classes=2".into(),
        "pattern_scales=1,9".into(),
        "t_min=9".into(),
        "t_max=18".into(),
        "samples_per_class=10".into(),
        "epochs=2".into(),
        "seeds=0".into(),
        "batch_size=4".into(),
    ]
    .into_iter()
    .collect()
}

fn with_sets(cmd: &str, sets: &[String], extra: &[&str]) -> Vec<String> {
    let mut args = vec![cmd.to_string()];
    for s in sets {
        args.push("--set".into());
        args.push(s.clone());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn help_lists_every_command_and_keys() {
    let out = mstr(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for cmd in [
        "gen-data", "train", "eval", "flops", "gradcheck", "sweep", "selftest",
    ] {
        assert!(text.contains(cmd), "--help missing {cmd}");
    }
    for key in ["seed", "fractal_p", "scale_levels", "data_dir", "t_list"] {
        assert!(text.contains(key), "--help missing key {key}");
    }
}

#[test]
fn unknown_flags_fail_fast() {
    let out = mstr(&["flops", "--definitely-not-a-flag"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_config_key_exits_one_and_names_it() {
    let out = mstr(&["flops", "--set", "fractal_q=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("fractal_q"));
}

#[test]
fn malformed_set_exits_one() {
    let out = mstr(&["flops", "--set", "no_equals_sign"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flops_prints_pinned_values_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("flops");
    let args = [
        "flops",
        "--set",
        "model_dim=8",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let out = mstr(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("52488"), "{text}");
    assert!(text.contains("8640"), "{text}");
    assert!(text.contains("83.54"), "{text}");

    let csv_path = out_dir.join("flops.csv");
    let first = std::fs::read(&csv_path).unwrap();
    assert!(first.starts_with(b"T,F,p,L,variant,analytic,counted,reduction_pct\n"));

    let out2 = mstr(&args);
    assert!(out2.status.success());
    assert_eq!(first, std::fs::read(&csv_path).unwrap());
}

#[test]
fn config_file_is_applied_before_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "model_dim = 8\nt_list = 81,162 # comment\n").unwrap();
    let out = mstr(&[
        "flops",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("52488"));

    // Override wins over the file.
    let out = mstr(&[
        "flops",
        "--config",
        cfg_path.to_str().unwrap(),
        "--set",
        "model_dim=16",
        "--out",
        dir.path().join("o2").to_str().unwrap(),
    ]);
    assert!(stdout(&out).contains("104976")); // 81^2 * 16
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for target in [&a, &b] {
        let out = mstr(&with_sets(
            "gen-data",
            &tiny_sets(Path::new("unused")),
            &["--out", target.to_str().unwrap(), "--seed", "9"],
        )
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for split in ["train", "val", "test"] {
        let ma = std::fs::read(a.join(split).join("manifest.csv")).unwrap();
        let mb = std::fs::read(b.join(split).join("manifest.csv")).unwrap();
        assert_eq!(ma, mb);
        let fa = std::fs::read(a.join(split).join("sample_00000.msf")).unwrap();
        let fb = std::fs::read(b.join(split).join("sample_00000.msf")).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn pipeline_gen_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    let sets = tiny_sets(&data);

    let out = mstr(&with_sets("gen-data", &sets, &["--out", data.to_str().unwrap()])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(data.join("train").join("manifest.csv").exists());

    for run in [&run1, &run2] {
        let out = mstr(&with_sets("train", &sets, &["--out", run.to_str().unwrap()])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>());
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(run.join("history.csv").exists());
        assert!(run.join("checkpoint_seed0.ckpt").exists());
    }
    // Same seed, same data: byte-identical histories (and checkpoints).
    assert_eq!(
        std::fs::read(run1.join("history.csv")).unwrap(),
        std::fs::read(run2.join("history.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(run1.join("checkpoint_seed0.ckpt")).unwrap(),
        std::fs::read(run2.join("checkpoint_seed0.ckpt")).unwrap()
    );

    let ckpt = run1.join("checkpoint_seed0.ckpt");
    let mut eval_sets = sets.clone();
    eval_sets.push(format!("checkpoint={}", ckpt.display()));
    let out = mstr(&with_sets(
        "eval",
        &eval_sets,
        &["--out", dir.path().join("eval").to_str().unwrap()],
    )
    .iter()
    .map(String::as_str)
    .collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    let report = stdout(&out);

    // Metrics in [0, 1]; confusion matrix sums to the split size (2 test
    // samples for samples_per_class=10 at 2 classes).
    for key in ["wa=", "ua=", "wf1="] {
        let line = report
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("missing {key} in {report}"));
        let value: f64 = line[key.len()..].parse().unwrap();
        assert!((0.0..=1.0).contains(&value));
    }
    let confusion_sum: u64 = report
        .lines()
        .skip_while(|l| !l.starts_with("confusion="))
        .skip(1)
        .flat_map(|l| l.split_whitespace())
        .filter_map(|tok| tok.parse::<u64>().ok())
        .sum();
    assert_eq!(confusion_sum, 2);
}

#[test]
fn eval_with_missing_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mstr(&[
        "eval",
        "--set",
        "checkpoint=/definitely/missing.ckpt",
        "--set",
        "data_dir=/also/missing",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_without_data_dir_exits_one() {
    let out = mstr(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("data_dir"));
}

#[test]
fn gradcheck_passes() {
    let out = mstr(&["gradcheck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all"), "{text}");
    assert!(text.contains("pass"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mstr(&["selftest", "--out", dir.path().join("st").to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn sweep_writes_aggregate_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let mut sets = tiny_sets(Path::new("unused"));
    sets.push("sweep_p=3".into());
    sets.push("sweep_l=1,2".into());
    let out = mstr(&with_sets("sweep", &sets, &["--out", out_dir.to_str().unwrap()])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("p,L,seed,test_wa,test_ua,test_wf1"));
    // One seed times two cells.
    assert_eq!(lines.count(), 2);
}
