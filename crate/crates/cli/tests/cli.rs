//! End-to-end runs of the `semcom` binary on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[model]
patch_size = 1
stage_dims = 4, 4, 8, 8
encoder_depths = 1, 1, 1, 1
hcd_depths = 1, 2, 1, 1
lcd_depths = 1, 1, 1, 1
heads = 1, 1, 2, 2

[train]
epochs_per_decoder = 2
batch_size = 4
eval_every = 1

[data]
train = synth:6:16:1
test = synth:2:16:2
";

fn semcom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semcom")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.ini");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(cfg: &Path, out: &Path, regimen: &str) -> Output {
    semcom(&[
        "train",
        "--config",
        s(cfg),
        "--regimen",
        regimen,
        "--seed",
        "0",
        "--out",
        s(out),
    ])
}

#[test]
fn train_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = train(&cfg, &out, "proposed");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "phase1.ckpt",
        "phase2.ckpt",
        "final.ckpt",
        "train_log.csv",
        "config.ini",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("regimen,seed,phase,epoch,snr_db,split,mse,psnr_db"));
    let phases: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert!(phases.contains(&"1") && phases.contains(&"2"));
    assert!(!log.contains('\r'));

    let iter_out = dir.path().join("iter");
    assert!(train(&cfg, &iter_out, "iterative").status.success());
    assert!(iter_out.join("final.ckpt").is_file());
    assert!(!iter_out.join("phase1.ckpt").exists());
}

#[test]
fn unknown_regimen_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("never");
    let o = train(&cfg, &out, "best-effort");
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[train]\nmomentum = 0.9\n").unwrap();
    assert_eq!(
        semcom(&["train", "--config", s(&bad), "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert!(!out.exists());
}

#[test]
fn distillation_with_zero_weight_matches_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[train]\nalpha = 0\n");
    let (a, b) = (dir.path().join("plain"), dir.path().join("kd"));
    assert!(train(&cfg, &a, "proposed").status.success());
    assert!(train(&cfg, &b, "proposed+kd").status.success());
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn resuming_from_phase1_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let full = dir.path().join("full");
    assert!(train(&cfg, &full, "proposed+transfer").status.success());
    let resumed = dir.path().join("resumed");
    let ckpt = full.join("phase1.ckpt");
    let o = semcom(&[
        "train",
        "--config",
        s(&cfg),
        "--regimen",
        "proposed+transfer",
        "--seed",
        "0",
        "--from-phase1",
        s(&ckpt),
        "--out",
        s(&resumed),
    ]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );
}

#[test]
fn numeric_blowup_exits_three_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[train]\nlearning_rate = 1e300\n");
    let o = train(&cfg, &dir.path().join("nan"), "proposed");
    assert_eq!(o.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
}

#[test]
fn eval_rows_images_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    assert!(train(&cfg, &run, "proposed").status.success());
    let ckpt = run.join("final.ckpt");
    let imgs = dir.path().join("imgs");
    let eval = |snr: &str, extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--config",
            s(&cfg),
            "--ckpt",
            s(&ckpt),
            "--decoder",
            "2",
            "--snr",
            snr,
        ];
        args.extend_from_slice(extra);
        semcom(&args)
    };
    let first = eval("7,1,5,3", &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let csv = String::from_utf8(first.stdout.clone()).unwrap();
    let snrs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(snrs, ["1", "3", "5", "7"]);
    assert_eq!(eval("1,3,5,7", &[]).stdout, first.stdout);

    let dumped = eval("1,inf", &["--dump-images", s(&imgs)]);
    assert!(dumped.status.success());
    let mut names: Vec<String> = fs::read_dir(&imgs)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["0_1.ppm", "0_inf.ppm", "1_1.ppm", "1_inf.ppm"]);
    assert!(fs::read(imgs.join("0_1.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));

    // Default-sized model against the tiny checkpoint.
    let o = semcom(&["eval", "--ckpt", s(&ckpt), "--data", "synth:2:32:0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(eval("1", &["--decoder", "3"]).status.code(), Some(2));
}

#[test]
fn compare_emits_one_row_per_regimen_and_snr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("cmp");
    let o = semcom(&["compare", "--config", s(&cfg), "--seeds", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 4);
    let budget: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[7].to_string())
        })
        .collect();
    assert!(budget.contains(&("iterative".into(), "4".into())));
    assert!(budget.contains(&("proposed".into(), "4".into())));

    let plots: Vec<PathBuf> = fs::read_dir(out.join("plots"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(plots.len(), 3 + 4 + 6);
    for p in &plots {
        let text = fs::read_to_string(p).unwrap();
        assert!(!text.is_empty());
        for line in text.lines() {
            let cols: Vec<f64> = line.split(' ').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols.len(), 2, "{}", p.display());
        }
    }
    // A cell equals a standalone training run with the same seed.
    let alone = dir.path().join("alone");
    assert!(train(&cfg, &alone, "proposed+kd").status.success());
    assert_eq!(
        fs::read(alone.join("final.ckpt")).unwrap(),
        fs::read(out.join("proposed+kd/seed0/final.ckpt")).unwrap()
    );
    assert_eq!(
        semcom(&["compare", "--config", s(&cfg), "--seeds", "0", "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn gradcheck_reports_every_op() {
    let o = semcom(&["gradcheck", "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let report = String::from_utf8(o.stdout).unwrap();
    for op in [
        "matmul",
        "add_bias",
        "add",
        "sub",
        "mul",
        "scale",
        "layer_norm",
        "softmax",
        "gelu",
        "attention",
        "gather_rows",
        "reshape",
        "mse",
        "sum",
        "normalize_power",
        "pipeline",
    ] {
        assert!(report.lines().any(|l| l.split_whitespace().next() == Some(op)), "{op}");
    }
    let faulty = semcom(&["gradcheck", "--seeds", "3", "--inject-fault", "gelu"]);
    assert_eq!(faulty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&faulty.stderr).contains("gelu"));
}

#[test]
fn dumped_config_parses_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let first = semcom(&["dump-config", "--config", s(&cfg)]);
    assert!(first.status.success());
    let dumped = dir.path().join("dumped.ini");
    fs::write(&dumped, &first.stdout).unwrap();
    assert_eq!(semcom(&["dump-config", "--config", s(&dumped)]).stdout, first.stdout);
    let defaults = String::from_utf8(semcom(&["dump-config"]).stdout).unwrap();
    assert!(defaults.contains("learning_rate = 5e-4"));
    assert!(defaults.contains("compression_ratio = 1/16"));
}
