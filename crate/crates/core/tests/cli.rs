use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pat_core::checkpoint::{Checkpoint, CheckpointKind};
use pat_core::data::load_csv;
use pat_core::model::count_parameters;

const ARCH: [&str; 8] = ["--patch-size", "48", "--embed-dim", "16", "--heads", "2", "--layers", "1"];

fn pat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pat")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pat(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A day-long synthetic cohort in a fresh directory.
fn workspace(n: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let n = n.to_string();
    ok(dir.path(), &["synth", "--n", &n, "--minutes", "1440", "--seed", "4", "--out", "d.csv"]);
    let data = dir.path().join("d.csv");
    (dir, data)
}

fn pretrain(dir: &Path, out: &str) {
    let mut args = vec!["pretrain", "--data", "d.csv", "--epochs", "2", "--batch-size", "8"];
    args.extend(["--decoder-dim", "8", "--decoder-heads", "2", "--decoder-ffn", "16", "--out", out]);
    args.extend(ARCH);
    ok(dir, &args);
}

#[test]
fn synth_writes_requested_rows() {
    let (_dir, data) = workspace(64);
    let recs = load_csv(&data).unwrap();
    assert_eq!(recs.len(), 64);
    assert!(recs.iter().all(|r| r.series.len() == 1440 && r.label.is_some()));
    assert_eq!(recs.iter().filter(|r| r.label == Some(1)).count(), 32);
}

#[test]
fn pretrain_records_config_and_inspect_counts_match() {
    let (dir, _) = workspace(24);
    pretrain(dir.path(), "m.ckpt");
    let ckpt = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    assert_eq!(ckpt.kind, CheckpointKind::Mae);
    assert_eq!(ckpt.mae.as_ref().unwrap().mask_ratio, 0.9);
    assert_eq!(ckpt.model.num_patches, 30);

    let report = ok(dir.path(), &["inspect-ckpt", "m.ckpt"]);
    assert!(report.contains("mae.mask_ratio=0.9"));
    let backbone = ckpt.param_count_with_prefix("embed.") + ckpt.param_count_with_prefix("encoder.");
    assert_eq!(backbone, count_parameters(&ckpt.model));
    assert!(report.contains(&format!("embedder+encoder parameters: {backbone}")));
    assert!(report.contains(&format!("count_parameters(config): {backbone}")));
}

#[test]
fn linear_probe_leaves_backbone_bytes_alone() {
    let (dir, _) = workspace(40);
    pretrain(dir.path(), "m.ckpt");
    let mut args = vec!["finetune", "--data", "d.csv", "--ckpt", "m.ckpt", "--mode", "LP", "--epochs", "3"];
    args.extend(["--lr", "0.01", "--out", "c.ckpt"]);
    args.extend(ARCH);
    ok(dir.path(), &args);

    let before = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let after = Checkpoint::load(&dir.path().join("c.ckpt")).unwrap();
    assert_eq!(after.kind, CheckpointKind::Classifier);
    let backbone = |c: &Checkpoint| -> Vec<(String, Vec<u32>)> {
        c.tensors
            .iter()
            .filter(|(n, _)| n.starts_with("embed.") || n.starts_with("encoder."))
            .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    assert!(!backbone(&before).is_empty());
    assert_eq!(backbone(&before), backbone(&after));
    assert!(after.tensor("head.w").is_some());
    assert!(before.tensor("decoder.embed.w").is_some() && after.tensor("decoder.embed.w").is_none());
}

#[test]
fn predict_and_explain_write_outputs() {
    let (dir, _) = workspace(20);
    let mut args = vec!["finetune", "--data", "d.csv", "--epochs", "2", "--out", "c.ckpt"];
    args.extend(ARCH);
    ok(dir.path(), &args);

    let stdout = ok(dir.path(), &["predict", "--ckpt", "c.ckpt", "--data", "d.csv", "--out", "p.csv"]);
    assert!(stdout.contains("AUC"));
    let preds = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("participant_id,probability"));
    let probs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 20);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

    ok(dir.path(), &["explain", "--ckpt", "c.ckpt", "--data", "d.csv", "--participant", "synth00003", "--out", "ex"]);
    let csv = fs::read_to_string(dir.path().join("ex/synth00003.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1441);
    assert!(dir.path().join("ex/synth00003.svg").exists());
}

#[test]
fn seeded_runs_are_reproducible() {
    let (dir, _) = workspace(24);
    pretrain(dir.path(), "a.ckpt");
    pretrain(dir.path(), "b.ckpt");
    assert_eq!(fs::read(dir.path().join("a.ckpt")).unwrap(), fs::read(dir.path().join("b.ckpt")).unwrap());
}

#[test]
fn config_file_supplies_missing_flags() {
    let (dir, _) = workspace(24);
    fs::write(
        dir.path().join("run.cfg"),
        "# tiny run\nepochs = 1\nbatch_size = 8\nmask_ratio = 0.5\ndecoder_dim = 8\ndecoder_heads = 2\n\
         decoder_ffn = 16\npatch_size = 48\nembed_dim = 16\nheads = 2\nlayers = 1\n",
    )
    .unwrap();
    ok(dir.path(), &["pretrain", "--data", "d.csv", "--mask-ratio", "0.75", "--config", "run.cfg", "--out", "m.ckpt"]);
    let ckpt = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let mae = ckpt.mae.unwrap();
    assert_eq!(mae.mask_ratio, 0.75);
    assert_eq!(mae.epochs, 1);
    assert_eq!(ckpt.model.embed_dim, 16);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let (dir, _) = workspace(8);
    assert_eq!(pat(dir.path(), &["predict", "--ckpt", "c.ckpt"]).status.code(), Some(1));
    assert_eq!(pat(dir.path(), &["synth", "--n", "many", "--out", "x.csv"]).status.code(), Some(1));
    assert_eq!(pat(dir.path(), &["--help"]).status.code(), Some(0));

    let missing = pat(dir.path(), &["predict", "--ckpt", "nope.ckpt", "--data", "d.csv", "--out", "p.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    fs::write(dir.path().join("bad.csv"), "participant_id,label,m0\np1,1,abc\n").unwrap();
    let bad = pat(dir.path(), &["pretrain", "--data", "bad.csv", "--out", "m.ckpt"]);
    assert_eq!(bad.status.code(), Some(2));

    // 1000 minutes do not divide into 18-minute patches.
    ok(dir.path(), &["synth", "--n", "4", "--minutes", "1000", "--out", "odd.csv"]);
    let odd = pat(dir.path(), &["pretrain", "--data", "odd.csv", "--out", "m.ckpt"]);
    assert_eq!(odd.status.code(), Some(2));
    assert!(!dir.path().join("m.ckpt").exists());
}
