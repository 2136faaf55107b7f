//! End-to-end runs of the `modgap` binary.

use std::path::Path;
use std::process::{Command, Output};

use modgap::report::TrainReport;

const SMALL: &[&str] = &[
    "--data.num_samples",
    "300",
    "--data.feature_dim",
    "4",
    "--model.hidden",
    "[8]",
    "--schedule.warmup_epochs",
    "3",
    "--schedule.adaptive_steps",
    "3",
    "--schedule.adaptive_epochs",
    "1",
    "--schedule.batch_size",
    "32",
];

fn modgap(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modgap"))
        .args(args)
        .env("MODGAP_OUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train_small(root: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    modgap(root, &args)
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "generate", "finetune", "fit", "ablate", "report", "gaps"] {
        let out = modgap(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn bad_keys_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = modgap(dir.path(), &["generate", "--adaptive.alhpa", "2"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("adaptive.alhpa"), "{}", stderr(&out));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[schedule]\nwarmup_epochz = 3\n").unwrap();
    let out = modgap(dir.path(), &["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("schedule.warmup_epochz"), "{}", stderr(&out));

    let out = modgap(dir.path(), &["generate", "--schedule.warmup_epochs", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("schedule.warmup_epochs"));

    let out = modgap(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_run_dir_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    for sub in ["report", "finetune", "gaps"] {
        let out = modgap(dir.path(), &[sub, "--run-dir", missing.to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{sub}: {}", stderr(&out));
    }
}

#[test]
fn generate_is_deterministic_and_never_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = modgap(dir.path(), &["generate", "--seed", "1", "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let out = modgap(dir.path(), &["generate", "--seed", "2", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert_eq!(std::fs::read(&a).unwrap(), bytes);
    let out = modgap(dir.path(), &["generate", "--seed", "2", "--force", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_ne!(std::fs::read(&a).unwrap(), bytes);

    // Default path lands under the output root.
    let out = modgap(dir.path(), &["generate", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("dataset-seed3.csv").is_file());
}

#[test]
fn generate_train_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut args = vec!["generate", "--out", data.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&modgap(dir.path(), &args)), 0);

    let run = dir.path().join("run");
    let out = train_small(dir.path(), &["--data", data.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "config.toml",
        "dataset.csv",
        "report.jsonl",
        "checkpoints/warmup.ckpt",
        "checkpoints/adaptive.ckpt",
        "gaps/step0.csv",
        "gaps/step2.csv",
        "fits/step2.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(run.join("dataset.csv")).unwrap());
    let report = TrainReport::load(&run.join("report.jsonl")).unwrap();
    assert_eq!(report.steps().map(|s| s.step).collect::<Vec<_>>(), vec![0, 1, 2]);

    // The run directory is never reused without --force.
    let again = train_small(dir.path(), &["--data", data.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert_eq!(code(&again), 2);

    let rep = dir.path().join("rep");
    let out = modgap(dir.path(), &["report", "--run-dir", run.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let traj = std::fs::read_to_string(rep.join("mixture_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 3);
    let hist = std::fs::read_to_string(rep.join("gap_histograms.csv")).unwrap();
    let steps: std::collections::BTreeSet<&str> =
        hist.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps.len(), 3);
    let curves = std::fs::read_to_string(rep.join("accuracy_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 + 3);

    // The config snapshot re-runs identically.
    let rerun = dir.path().join("rerun");
    let out = modgap(
        dir.path(),
        &[
            "train",
            "--config",
            run.join("config.toml").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            rerun.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(run.join("report.jsonl")).unwrap(),
        std::fs::read(rerun.join("report.jsonl")).unwrap()
    );

    // Gap dump and mixture fit over it.
    let gaps = dir.path().join("gaps.csv");
    let out = modgap(dir.path(), &["gaps", "--run-dir", run.to_str().unwrap(), "--out", gaps.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&gaps).unwrap();
    assert!(text.starts_with("sample_id,gap,split,snapshot_epoch"));
    assert_eq!(text.lines().count(), 301);
    let out = modgap(dir.path(), &["fit", "--gaps", gaps.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(fit["pi"][0].as_f64().unwrap() >= fit["pi"][1].as_f64().unwrap());

    // Fine-tune writes a fresh sibling directory with its own checkpoint.
    let out = modgap(dir.path(), &["finetune", "--run-dir", run.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tuned = dir.path().join("run-finetune-0.5");
    assert!(tuned.join("checkpoints/finetune.ckpt").is_file());
}

#[test]
fn resume_from_warmup_checkpoint_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    assert_eq!(code(&train_small(dir.path(), &["--run-dir", full.to_str().unwrap()])), 0);
    let resumed = dir.path().join("resumed");
    let ck = full.join("checkpoints/warmup.ckpt");
    let out = train_small(dir.path(), &["--run-dir", resumed.to_str().unwrap(), "--resume", ck.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(full.join("checkpoints/adaptive.ckpt")).unwrap(),
        std::fs::read(resumed.join("checkpoints/adaptive.ckpt")).unwrap()
    );
}

#[test]
fn empty_subset_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    // Student-t tails never give a posterior of exactly 1.
    let out = train_small(
        dir.path(),
        &["--run-dir", run.to_str().unwrap(), "--adaptive.mixture_family", "student_t"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = modgap(dir.path(), &["finetune", "--run-dir", run.to_str().unwrap(), "--threshold", "1.0"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("empty subset"));
}

#[test]
fn numerical_blowup_exits_three_and_keeps_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = train_small(
        dir.path(),
        &[
            "--run-dir",
            run.to_str().unwrap(),
            "--optimizer.learning_rate",
            "1e300",
            "--schedule.grad_clip",
            "0",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("warmup"));
    assert!(run.join("config.toml").is_file());
    assert!(run.join("report.jsonl").is_file());
}

#[test]
fn standard_benchmark_has_one_snapshot_per_step() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&modgap(dir.path(), &["generate", "--seed", "1"])), 0);
    let data = dir.path().join("dataset-seed1.csv");
    let out = modgap(dir.path(), &["train", "--seed", "1", "--data", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("train-seed1");
    let out = modgap(dir.path(), &["report", "--run-dir", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let traj = std::fs::read_to_string(dir.path().join("train-seed1-report/mixture_trajectory.csv")).unwrap();
    let defaults = modgap::config::RunConfig::default();
    assert_eq!(traj.lines().count(), 1 + defaults.schedule.adaptive_steps);
}
