use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dri");

fn dri(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("DRI_THREADS", "1").output().expect("spawn dri")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = dri(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn checksum_line(s: &str) -> String {
    s.lines().find(|l| l.starts_with("manifest sha256")).expect("checksum line").to_string()
}

const QUICK: [&str; 6] = ["--set", "train.pretrain_epochs=0", "--set", "train.epochs=1", "--set", "train.eval_every=0"];

fn train(out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    args.extend(extra);
    ok(&args)
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let first = ok(&["gen-data", "--out", a.to_str().unwrap()]);
    assert!(first.contains("modalities opt, sar"), "{first}");
    for split in ["train", "query", "gallery"] {
        assert!(first.lines().any(|l| l.starts_with(split)), "{first}");
    }
    let second = ok(&["gen-data", "--out", b.to_str().unwrap()]);
    assert_eq!(checksum_line(&first), checksum_line(&second));
    let other = ok(&["gen-data", "--seed", "43", "--out", c.to_str().unwrap()]);
    assert_ne!(checksum_line(&first), checksum_line(&other));
}

#[test]
fn invalid_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["gen-data", "--out", out, "--set", "dataset.num_ids=1"],
        vec!["params", "--set", "no.such.key=3"],
        vec!["params", "--set", "model.peft=bogus"],
        vec!["ablate", "--grid", "no-such-grid", "--out", out],
    ] {
        let o = dri(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("dri: "), "{args:?}");
    }
    assert_eq!(dri(&["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(dri(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.dri");
    let o = dri(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = dri(&["train", "--out", dir.path().to_str().unwrap(), "--set", "dataset.root=/nonexistent/data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn params_itemizes_the_paper_head() {
    let s = ok(&[
        "params",
        "--set", "model.peft=frozen",
        "--set", "model.dim=384",
        "--set", "model.heads=6",
        "--set", "dataset.num_ids=108",
        "--set", "dataset.test_ids=8",
    ]);
    let row = |name: &str| {
        s.lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .unwrap_or_else(|| panic!("no {name} row in\n{s}"))
            .to_string()
    };
    assert!(row("head.classifier").contains("38400"), "{s}");
    assert!(row("head.bnneck").contains("384"), "{s}");
}

#[test]
fn frozen_zero_epoch_run_reports_only_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--set", "model.peft=frozen", "--set", "train.epochs=0"]);
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(report.matches("[eval epoch").count(), 1, "{report}");
    assert!(report.contains("[eval epoch 0]"));
    assert!(!report.contains("finetune epoch"));
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let summary = train(&run, &["--set", "model.peft=dri"]);
    assert!(summary.contains("cross-modal mAP"), "{summary}");
    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    let line = |key: &str| report.lines().find(|l| l.starts_with(key)).unwrap().split('=').nth(1).unwrap().trim().to_string();
    assert_eq!(line("backbone_checksum_before"), line("backbone_checksum_after"));

    let ckpt = run.join("checkpoint.dri");
    let ckpt = ckpt.to_str().unwrap();
    let first = ok(&["eval", "--checkpoint", ckpt, "--protocol", "opt->sar", "--protocol", "all"]);
    let second = ok(&["eval", "--checkpoint", ckpt, "--protocol", "opt->sar", "--protocol", "all"]);
    assert_eq!(first, second);
    assert!(first.lines().any(|l| l.starts_with("opt->sar")), "{first}");
    assert!(first.contains("trainable params"), "{first}");

    let emb = dir.path().join("emb");
    let out = ok(&["export-embeddings", "--checkpoint", ckpt, "--out", emb.to_str().unwrap()]);
    assert!(out.contains("width 64"), "{out}");
    let csv = std::fs::read_to_string(emb.join("embeddings.csv")).unwrap();
    assert!(csv.starts_with("path,id,modality,split"));
    assert!(emb.join("embeddings.dri").exists());
}

#[test]
fn nan_loss_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap()];
    args.extend(QUICK);
    args.extend(["--set", "model.peft=full-ft", "--set", "train.lr=1e30"]);
    let o = dri(&args);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
