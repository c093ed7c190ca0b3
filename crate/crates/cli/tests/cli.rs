//! End-to-end runs of the `memefuse` binary: synth -> preprocess -> train ->
//! evaluate/predict, plus the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memefuse_core::data::{read_records, write_records};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memefuse"));
    cmd.env("MEMEFUSE_LOG", "quiet");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "[model]\n\
         vocab_size = 64\n\
         text_embed_dim = 4\n\
         text_hidden_dim = 8\n\
         text_layers = 1\n\
         text_heads = 2\n\
         text_ff_dim = 16\n\
         max_seq_len = 24\n\
         image_resolution = 32\n\
         image_channels = 2,2,2,2,4\n\
         image_convs = 1,1,1,1,1\n\
         head_hidden1 = 16\n\
         head_hidden2 = 8\n\
         seed = 7\n\
         [training]\n\
         batch_size = 8\n\
         max_epochs_per_phase = 2\n\
         patience = 5\n\
         validation_fraction = 0.2\n\
         seed = 11\n",
    )
    .unwrap();
    path
}

struct Corpus {
    dir: tempfile::TempDir,
    records: PathBuf,
}

fn prepared_corpus(count: usize) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = run(&[
        "synth",
        "--out",
        root.join("corpus").to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        "5",
        "--resolution",
        "32",
    ]);
    assert_success(&out);
    let records = root.join("train.records");
    let out = run(&[
        "preprocess",
        "--labels",
        root.join("corpus/labels.tsv").to_str().unwrap(),
        "--images",
        root.join("corpus/images").to_str().unwrap(),
        "--vocab",
        root.join("vocab.txt").to_str().unwrap(),
        "--build-vocab",
        "64",
        "--out",
        records.to_str().unwrap(),
        "--resolution",
        "32",
        "--seq-len",
        "24",
    ]);
    assert_success(&out);
    Corpus { dir, records }
}

#[test]
fn synth_preprocess_produces_readable_records_deterministically() {
    let corpus = prepared_corpus(12);
    let samples = read_records(&corpus.records).unwrap();
    assert_eq!(samples.len(), 12);
    assert_eq!(samples[0].image.shape(), &[3, 32, 32]);
    assert_eq!(samples[0].text.input_ids.len(), 24);

    // rerunning preprocess yields a bitwise-identical file
    let root = corpus.dir.path();
    let rerun = root.join("again.records");
    let out = run(&[
        "preprocess",
        "--labels",
        root.join("corpus/labels.tsv").to_str().unwrap(),
        "--images",
        root.join("corpus/images").to_str().unwrap(),
        "--vocab",
        root.join("vocab.txt").to_str().unwrap(),
        "--out",
        rerun.to_str().unwrap(),
        "--resolution",
        "32",
        "--seq-len",
        "24",
    ]);
    assert_success(&out);
    assert_eq!(
        std::fs::read(&corpus.records).unwrap(),
        std::fs::read(&rerun).unwrap()
    );
}

#[test]
fn preprocess_missing_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.tsv");
    std::fs::write(&labels, "image_name\ttext\thumour\nx.ppm\thello\tfunny\n").unwrap();
    let out = run(&[
        "preprocess",
        "--labels",
        labels.to_str().unwrap(),
        "--images",
        dir.path().to_str().unwrap(),
        "--vocab",
        dir.path().join("v.txt").to_str().unwrap(),
        "--build-vocab",
        "32",
        "--out",
        dir.path().join("o.records").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_evaluate_predict_pipeline() {
    let corpus = prepared_corpus(20);
    let root = corpus.dir.path();
    let config = tiny_config(root);
    let out_dir = root.join("runout");

    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "multimodal",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(out_dir.join("best.ckpt").exists());
    assert!(out_dir.join("last.ckpt").exists());
    assert!(out_dir.join("metrics.tsv").exists());

    // the log has one line per epoch with a nondecreasing lr through phase 1
    let log = std::fs::read_to_string(out_dir.join("train.log")).unwrap();
    let mut last_lr = 0.0f64;
    let mut frozen_lines = 0;
    for line in log.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 14, "line `{line}`");
        if fields[1] == "frozen" {
            frozen_lines += 1;
            let lr: f64 = fields[2].parse().unwrap();
            assert!(lr >= last_lr, "lr decreased in warm-up: {line}");
            last_lr = lr;
        }
    }
    assert!(frozen_lines >= 1);

    // evaluate prints the three subtasks
    let out = run(&[
        "evaluate",
        "--checkpoint",
        out_dir.join("best.ckpt").to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
    ]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("subtask_a\t"), "{stdout}");

    // predictions file: header plus one line per sample, known class names
    let pred_path = root.join("pred.tsv");
    let out = run(&[
        "predict",
        "--checkpoint",
        out_dir.join("best.ckpt").to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--out",
        pred_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let pred = std::fs::read_to_string(&pred_path).unwrap();
    assert_eq!(pred.lines().count(), 21);
    for line in pred.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 6);
        assert!(["negative", "neutral", "positive"].contains(&fields[1]), "{line}");
    }
}

#[test]
fn evaluate_on_self_labeled_records_scores_one() {
    let corpus = prepared_corpus(16);
    let root = corpus.dir.path();
    let config = tiny_config(root);
    let out_dir = root.join("runout");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "text",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);

    // relabel the records with the model's own predictions
    let model = memefuse_core::checkpoint::load_model(&out_dir.join("best.ckpt")).unwrap();
    let mut samples = read_records(&corpus.records).unwrap();
    for s in &mut samples {
        s.labels = model.predict(s).unwrap().predicted_labels();
    }
    let relabeled = root.join("self.records");
    write_records(&relabeled, &samples).unwrap();

    let out = run(&[
        "evaluate",
        "--checkpoint",
        out_dir.join("best.ckpt").to_str().unwrap(),
        "--records",
        relabeled.to_str().unwrap(),
    ]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    // every class the model predicts is scored perfectly; absent classes
    // still hold macro F1 below 1, so check the machine lines directly
    for line in stdout.lines() {
        if let Some(rest) = line.strip_prefix("coarse_motivation\t") {
            let value: f64 = rest.parse().unwrap();
            assert!(value > 0.0);
        }
    }
    assert!(stdout.contains("subtask_a"));
}

#[test]
fn text_variant_checkpoint_has_no_image_parameters() {
    let corpus = prepared_corpus(14);
    let root = corpus.dir.path();
    let config = tiny_config(root);
    let out_dir = root.join("runout");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "text",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let manifest = std::fs::read(out_dir.join("best.ckpt")).unwrap();
    let text = String::from_utf8_lossy(&manifest);
    assert!(!text.contains("param.img."));
    assert!(text.contains("param.text."));
}

#[test]
fn same_seed_trains_identically() {
    let corpus = prepared_corpus(14);
    let root = corpus.dir.path();
    let config = tiny_config(root);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = root.join(name);
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--records",
            corpus.records.to_str().unwrap(),
            "--variant",
            "multimodal",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_success(&out);
        logs.push(std::fs::read_to_string(out_dir.join("train.log")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn config_overrides_reject_unknown_keys() {
    let corpus = prepared_corpus(12);
    let root = corpus.dir.path();
    let config = tiny_config(root);
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "multimodal",
        "--out",
        root.join("x").to_str().unwrap(),
        "--set",
        "training.nonsense=1",
    ]);
    assert_eq!(out.status.code(), Some(1)); // config error
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let corpus = prepared_corpus(12);
    let root = corpus.dir.path();
    let ckpt = root.join("bad.ckpt");
    std::fs::write(&ckpt, b"memefuse-checkpoint v1\nmeta nonsense
").unwrap();
    let out = run(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn corrupt_records_exit_2() {
    let corpus = prepared_corpus(12);
    let root = corpus.dir.path();
    let mut bytes = std::fs::read(&corpus.records).unwrap();
    let len = bytes.len();
    bytes[len - 10] ^= 0x55;
    let corrupted = root.join("corrupt.records");
    std::fs::write(&corrupted, &bytes).unwrap();
    // train reads every record and must hit the CRC failure
    let config = tiny_config(root);
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corrupted.to_str().unwrap(),
        "--variant",
        "multimodal",
        "--out",
        root.join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_quickly_at_reduced_cases() {
    let out = run(&["gradcheck", "--cases", "3"]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradcheck\tpass"));
    assert!(stdout.contains("worst\t"));
}

#[test]
fn train_resume_continues_and_checks_variant() {
    let corpus = prepared_corpus(16);
    let root = corpus.dir.path();
    let config = tiny_config(root);
    let first = root.join("first");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "multimodal",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_success(&out);

    // resume the finished run with a larger epoch budget: only the extra
    // unfrozen epochs execute
    let second = root.join("second");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "multimodal",
        "--out",
        second.to_str().unwrap(),
        "--resume",
        first.join("last.ckpt").to_str().unwrap(),
        "--set",
        "training.max_epochs_per_phase=3",
    ]);
    assert_success(&out);
    let log = std::fs::read_to_string(second.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 1, "one extra unfrozen epoch: {log}");
    assert!(log.starts_with("3\tunfrozen\t"), "{log}");

    // resuming into a different variant is a checkpoint mismatch
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--records",
        corpus.records.to_str().unwrap(),
        "--variant",
        "image",
        "--out",
        root.join("third").to_str().unwrap(),
        "--resume",
        first.join("last.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gradcheck_lints_the_config_when_given() {
    let dir = tempfile::tempdir().unwrap();
    let good = tiny_config(dir.path());
    let out = bin()
        .args(["gradcheck", "--cases", "2", "--config", good.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("config\tok"));

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "[model]\nimage_resolution = 500\n").unwrap();
    let out = bin()
        .args(["gradcheck", "--cases", "2", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1)); // config error
}
