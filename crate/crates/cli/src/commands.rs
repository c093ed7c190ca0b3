use std::fmt::Write as _;
use std::path::Path;

use memefuse_core::checkpoint::{load_model, save_model};
use memefuse_core::data::{
    build_vocab, generate_synthetic_dataset, load_image, parse_label_file_with_map, read_records,
    tokenize, tokenize_with_stats, write_records, write_synthetic_corpus, Category, LabelMap,
    MemeSample, SynthConfig, Vocabulary, CATEGORIES,
};
use memefuse_core::error::{Error, Result};
use memefuse_core::fusion::{fused_model_gradcheck, Model, ModelVariant};
use memefuse_core::metrics::{competition_scores, evaluate_model};
use memefuse_core::tensor::gradcheck_suite;
use memefuse_core::train::{split_train_validation, train_two_phase_with, TrainOptions};

use crate::config::RunConfig;

fn verbose() -> bool {
    std::env::var("MEMEFUSE_LOG").map(|v| v != "quiet").unwrap_or(true)
}

macro_rules! progress {
    ($($arg:tt)*) => {
        if verbose() {
            eprintln!($($arg)*);
        }
    };
}

#[allow(clippy::too_many_arguments)]
pub fn preprocess(
    labels: &Path,
    images: &Path,
    vocab_path: &Path,
    out: &Path,
    resolution: usize,
    seq_len: usize,
    build_vocab_size: Option<usize>,
    label_map: Option<&Path>,
) -> Result<()> {
    let map = match label_map {
        Some(path) => LabelMap::load(path)?,
        None => LabelMap::default_map(),
    };
    let rows = parse_label_file_with_map(labels, &map)?;
    let vocab = match build_vocab_size {
        Some(size) => {
            let corpus: Vec<String> = rows.iter().map(|r| r.text.clone()).collect();
            let vocab = build_vocab(&corpus, size)?;
            vocab.save(vocab_path)?;
            progress!("built vocabulary of {} units at {}", vocab.len(), vocab_path.display());
            vocab
        }
        None => Vocabulary::load(vocab_path)?,
    };

    let mut samples = Vec::with_capacity(rows.len());
    let mut truncated = 0usize;
    for row in &rows {
        let image = load_image(&images.join(&row.image_name), resolution)?;
        let (text, stats) = tokenize_with_stats(&row.text, &vocab, seq_len)?;
        if stats.truncated {
            truncated += 1;
        }
        samples.push(MemeSample {
            id: row.image_name.clone(),
            image,
            text,
            labels: row.labels,
        });
    }
    write_records(out, &samples)?;

    println!("samples\t{}", samples.len());
    println!("truncated_texts\t{truncated}");
    for cat in CATEGORIES {
        let mut hist = vec![0usize; cat.class_count()];
        for s in &samples {
            hist[s.labels.get(cat) as usize] += 1;
        }
        let cells: Vec<String> = hist.iter().map(|c| c.to_string()).collect();
        println!("hist_{}\t{}", cat.name(), cells.join("\t"));
    }
    Ok(())
}

pub fn train(
    config_path: &Path,
    records: &Path,
    variant: &str,
    out: &Path,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<()> {
    let variant = ModelVariant::parse(variant)?;
    let mut run = RunConfig::load(config_path)?;
    run.apply_overrides(overrides)?;

    let samples = read_records(records)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", records.display())));
    }
    // the model's vocabulary must cover every token id in the records
    let max_id = samples
        .iter()
        .flat_map(|s| s.text.input_ids.iter())
        .copied()
        .max()
        .unwrap_or(0);
    if max_id as usize >= run.text.vocab_size {
        return Err(Error::Input(format!(
            "records use token id {max_id} but [model] vocab_size is {}",
            run.text.vocab_size
        )));
    }

    std::fs::create_dir_all(out)?;
    let model_config = run.model_config(variant);
    let mut model = Model::build(model_config)?;
    let train_config = run.train_config();
    let (train_set, val_set) =
        split_train_validation(&samples, train_config.validation_fraction, train_config.seed)?;
    progress!(
        "training {} variant on {} samples ({} validation)",
        variant.name(),
        train_set.len(),
        val_set.len()
    );

    let mut log_lines = String::new();
    let outcome = {
        let options = TrainOptions {
            checkpoint_dir: Some(out),
            resume_from: resume,
            on_epoch: Some(Box::new(|entry: &memefuse_core::train::EpochLog| {
                progress!("{}", entry.to_line());
                true
            })),
            ..TrainOptions::default()
        };
        train_two_phase_with(&mut model, &train_set, &val_set, &train_config, options)?
    };
    for entry in &outcome.log {
        let _ = writeln!(log_lines, "{}", entry.to_line());
    }
    std::fs::write(out.join("train.log"), log_lines)?;

    // the model now holds the best parameters; persist them and the final
    // per-head validation table
    save_model(&out.join("best.ckpt"), &model)?;
    let scores = evaluate_model(&model, &val_set)?;
    let mut table = String::from("variant");
    for cat in CATEGORIES {
        let _ = write!(table, "\t{}", cat.name());
    }
    let _ = writeln!(table);
    let _ = write!(table, "{}", variant.name());
    for v in scores {
        let _ = write!(table, "\t{v:.4}");
    }
    let _ = writeln!(table);
    std::fs::write(out.join("metrics.tsv"), &table)?;
    print!("{table}");
    println!("best_monitored\t{:.6}", outcome.best_metric);
    Ok(())
}

pub fn evaluate(checkpoint: &Path, records: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let samples = read_records(records)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", records.display())));
    }
    let mut gold = Vec::with_capacity(samples.len());
    let mut pred = Vec::with_capacity(samples.len());
    for s in &samples {
        gold.push(s.labels);
        pred.push(model.predict(s)?.predicted_labels());
    }
    let report = competition_scores(&gold, &pred)?;
    print!("{}", report.to_table());
    print!("{}", report.to_machine());
    Ok(())
}

pub fn predict(checkpoint: &Path, records: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let samples = read_records(records)?;
    let mut lines =
        String::from("id\toverall_sentiment\thumour\tsarcasm\toffensive\tmotivational\n");
    for s in &samples {
        let labels = model.predict(s)?.predicted_labels();
        let _ = writeln!(
            lines,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.id,
            Category::Sentiment.class_names()[labels.sentiment as usize],
            Category::Humor.class_names()[labels.humor as usize],
            Category::Sarcasm.class_names()[labels.sarcasm as usize],
            Category::Offense.class_names()[labels.offense as usize],
            Category::Motivation.class_names()[labels.motivation as usize],
        );
    }
    std::fs::write(out, lines)?;
    progress!("wrote {} predictions to {}", samples.len(), out.display());
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, cases: usize) -> Result<()> {
    if let Some(path) = config {
        // lint the configuration up front; the numerical suite itself runs
        // on a fixed reduced probe model regardless
        let run = RunConfig::load(path)?;
        run.model_config(run.variant).validate()?;
        println!("config	ok");
    }
    let suite = gradcheck_suite(cases, 5e-3, 20_260_808)?;
    let mut all_ok = true;
    let mut worst: (String, f64) = (String::new(), 0.0);
    for check in &suite {
        let ok = check.worst < 1e-2;
        all_ok &= ok;
        println!(
            "op {:<24} {:>10.3e} {}",
            check.name,
            check.worst,
            if ok { "ok" } else { "FAIL" }
        );
        if check.worst > worst.1 {
            worst = (check.name.to_string(), check.worst);
        }
    }
    let fused = fused_model_gradcheck(1e-3)?;
    for check in &fused {
        let ok = check.worst < 1e-2;
        all_ok &= ok;
        println!(
            "model {:<28} {:>10.3e} ({}/{} coords) {}",
            check.name,
            check.worst,
            check.resolvable,
            check.resolvable + check.skipped,
            if ok { "ok" } else { "FAIL" }
        );
        if check.worst > worst.1 {
            worst = (check.name.clone(), check.worst);
        }
    }
    println!("worst\t{}\t{:.3e}", worst.0, worst.1);
    if all_ok {
        println!("gradcheck\tpass");
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: {} at {:.3e}",
            worst.0, worst.1
        )))
    }
}

pub fn synth(out: &Path, count: usize, seed: u64, resolution: usize) -> Result<()> {
    let config = SynthConfig {
        resolution,
        ..SynthConfig::default()
    };
    let labels_path = write_synthetic_corpus(out, count, seed, &config)?;
    // sanity: the generator agrees with itself
    let (samples, vocab) = generate_synthetic_dataset(count, seed, &config)?;
    println!("samples\t{}", samples.len());
    println!("labels\t{}", labels_path.display());
    println!("images\t{}", out.join("images").display());
    println!("vocab_units\t{}", vocab.len());
    // spot-check one tokenization to confirm the template corpus round-trips
    let roundtrip = tokenize("sun glow dawn", &vocab, config.max_seq_len)?;
    debug_assert!(roundtrip.input_ids[0] == 2);
    let _ = roundtrip;
    Ok(())
}
