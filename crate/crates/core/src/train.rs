//! Two-phase training: heads-only with frozen encoders, then full
//! fine-tuning at a lower learning rate, both under patience-based early
//! stopping on mean validation macro F1.
//!
//! While encoders are frozen their pooled features per sample cannot change,
//! so phase 1 computes them once and trains the heads on the cache; the
//! resulting parameter trajectory is bitwise identical to recomputing the
//! encoders every step (the encoders are deterministic and consume no
//! dropout randomness). The per-epoch `last.ckpt` carries optimizer moments,
//! the PRNG state, and the best-so-far snapshot, which is what makes
//! resume-from-checkpoint reproduce an uninterrupted run exactly.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{MemeSample, CATEGORIES};
use crate::error::{Error, Result};
use crate::fusion::{heads_forward_on_tape, HeadOutputs, Model};
use crate::metrics::macro_f1;
use crate::optim::{
    compute_class_weights, lr_at_step, optimizer_step, total_loss_on_tape, ClassCounts,
    LossReport, OptimizerConfig, OptimizerState,
};
use crate::params::ParamBinder;
use crate::rng::Rng;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Frozen,
    Unfrozen,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Frozen => "frozen",
            Phase::Unfrozen => "unfrozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Phase::Frozen),
            "unfrozen" => Ok(Phase::Unfrozen),
            other => Err(Error::Input(format!("unknown phase `{other}`"))),
        }
    }

    fn index(self) -> usize {
        match self {
            Phase::Frozen => 0,
            Phase::Unfrozen => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Optimizer template; its `peak_lr` is replaced by the phase rate.
    pub optimizer: OptimizerConfig,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs_per_phase: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Train phase-1 heads on cached encoder features (bitwise identical to
    /// recomputing, considerably faster).
    pub cache_frozen_features: bool,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, seed: u64) -> Self {
        TrainConfig {
            optimizer,
            phase1_lr: 5e-4,
            phase2_lr: 5e-5,
            patience: 30,
            batch_size: 16,
            max_epochs_per_phase: 50,
            validation_fraction: 0.10,
            seed,
            cache_frozen_features: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs_per_phase == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs_per_phase must be positive".into(),
            ));
        }
        if !(self.phase1_lr > 0.0 && self.phase2_lr > 0.0) {
            return Err(Error::Config("phase learning rates must be positive".into()));
        }
        let mut opt = self.optimizer.clone();
        opt.peak_lr = self.phase1_lr;
        opt.validate()
    }

    fn phase_lr(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Frozen => self.phase1_lr,
            Phase::Unfrozen => self.phase2_lr,
        }
    }
}

/// Deterministic shuffled split; validation gets round(fraction * n)
/// samples.
pub fn split_train_validation(
    samples: &[MemeSample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<MemeSample>, Vec<MemeSample>)> {
    if samples.len() < 10 {
        return Err(Error::Input(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = samples.len();
    let val_n = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from(seed);
    rng.shuffle(&mut order);
    let validation = order[..val_n].iter().map(|&i| samples[i].clone()).collect();
    let train = order[val_n..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, validation))
}

/// Toggle encoder trainability: frozen trains heads only.
pub fn set_phase(model: &mut Model, phase: Phase) {
    model
        .params
        .set_encoders_trainable(phase == Phase::Unfrozen);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Early stopping on a monitored metric; improvement means strictly
/// greater.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub epochs_since_improvement: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.epochs_since_improvement = 0;
            StopDecision::Improved
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// One line per epoch. `lr` is the rate used at the epoch's last step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_losses: [f64; 5],
    pub val_f1: [f64; 5],
    pub monitored: f64,
    /// Per-head train-set accuracy, only when tracking is enabled.
    pub train_accuracy: Option<[f64; 5]>,
}

impl EpochLog {
    /// Tab-separated: epoch, phase, lr, five train losses, five validation
    /// macro F1, monitored metric.
    pub fn to_line(&self) -> String {
        let mut fields = vec![
            self.epoch.to_string(),
            self.phase.name().to_string(),
            format!("{:.6e}", self.lr),
        ];
        fields.extend(self.train_losses.iter().map(|v| format!("{v:.6e}")));
        fields.extend(self.val_f1.iter().map(|v| format!("{v:.6}")));
        fields.push(format!("{:.6}", self.monitored));
        fields.join("\t")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_metric: f64,
    /// True when the run stopped at `halt_after` rather than completing.
    pub halted: bool,
}

/// Hooks and knobs for tests and the resume path.
pub struct TrainOptions<'a> {
    /// Write `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<&'a Path>,
    /// Resume from a `last.ckpt` written by a previous run.
    pub resume_from: Option<&'a Path>,
    /// Stop after completing this (phase, epoch), as if interrupted.
    pub halt_after: Option<(Phase, usize)>,
    /// Restrict the run to a single phase.
    pub only_phase: Option<Phase>,
    /// Track per-head train accuracy each epoch (costs one eval pass).
    pub track_train_accuracy: bool,
    /// Called after each epoch; return false to stop the current phase.
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog) -> bool + 'a>>,
}

#[allow(clippy::derivable_impls)] // Box<dyn FnMut> fields keep this manual
impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            checkpoint_dir: None,
            resume_from: None,
            halt_after: None,
            only_phase: None,
            track_train_accuracy: false,
            on_epoch: None,
        }
    }
}

type Snapshot = Vec<Vec<f32>>;

fn snapshot(model: &Model) -> Snapshot {
    model
        .params
        .iter()
        .map(|(_, p)| p.tensor.values().to_vec())
        .collect()
}

fn restore(model: &mut Model, snap: &Snapshot) -> Result<()> {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (id, values) in ids.into_iter().zip(snap) {
        model.params.tensor_mut(id).set_values(values.clone())?;
    }
    Ok(())
}

struct ResumePoint {
    phase: Phase,
    epoch: usize,
    global_step: u64,
    stopper: EarlyStopper,
    rng: Rng,
    optimizer: OptimizerState,
    best: Snapshot,
}

#[allow(clippy::too_many_arguments)]
fn write_last_checkpoint(
    dir: &Path,
    model: &Model,
    phase: Phase,
    epoch: usize,
    global_step: u64,
    stopper: &EarlyStopper,
    rng: &Rng,
    optimizer: &OptimizerState,
    best: &Snapshot,
) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.put_model_config(&model.config);
    ckpt.put_params("param", &model.params);
    ckpt.put_optimizer(optimizer, &model.params);
    ckpt.set_meta("train.phase", phase.name());
    ckpt.set_meta("train.epoch", epoch);
    ckpt.set_meta("train.step", global_step);
    ckpt.set_meta_f64_bits("train.best_bits", stopper.best);
    ckpt.set_meta("train.since", stopper.epochs_since_improvement);
    ckpt.set_meta_rng("train.rng", rng.state());
    for ((_, p), values) in model.params.iter().zip(best) {
        ckpt.add_blob(&format!("best.{}", p.name), p.tensor.shape(), values.clone());
    }
    ckpt.save(&dir.join("last.ckpt"))
}

fn read_resume(path: &Path, model: &mut Model, patience: usize) -> Result<ResumePoint> {
    let ckpt = Checkpoint::load(path)?;
    let on_disk = ckpt.read_model_config()?;
    if on_disk.variant != model.config.variant || on_disk.fused_dim() != model.config.fused_dim() {
        return Err(Error::Checkpoint(format!(
            "resume checkpoint was trained as `{}` ({} features), model is `{}` ({})",
            on_disk.variant.name(),
            on_disk.fused_dim(),
            model.config.variant.name(),
            model.config.fused_dim()
        )));
    }
    ckpt.read_params_into("param", &mut model.params)?;
    let optimizer = ckpt.read_optimizer(&model.params)?;
    let mut best = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        let (shape, data) = ckpt.blob(&format!("best.{}", p.name))?;
        if shape != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "best snapshot for `{}` has shape {shape:?}, expected {:?}",
                p.name,
                p.tensor.shape()
            )));
        }
        best.push(data.to_vec());
    }
    Ok(ResumePoint {
        phase: Phase::parse(ckpt.meta_str("train.phase")?)?,
        epoch: ckpt.meta_parse("train.epoch")?,
        global_step: ckpt.meta_parse("train.step")?,
        stopper: EarlyStopper {
            patience,
            best: ckpt.meta_f64_bits("train.best_bits")?,
            epochs_since_improvement: ckpt.meta_parse("train.since")?,
        },
        rng: Rng::from_state(ckpt.meta_rng("train.rng")?),
        optimizer,
        best,
    })
}

/// Evaluate per-head macro F1, optionally through cached features.
fn validate_scores(
    model: &Model,
    val: &[MemeSample],
    cache: Option<&[Vec<f32>]>,
) -> Result<[f64; 5]> {
    let mut gold = Vec::with_capacity(val.len());
    let mut pred = Vec::with_capacity(val.len());
    for (i, s) in val.iter().enumerate() {
        gold.push(s.labels);
        let outputs = match cache {
            Some(features) => heads_eval_on_features(model, &features[i])?,
            None => model.predict(s)?,
        };
        pred.push(outputs.predicted_labels());
    }
    let mut scores = [0.0f64; 5];
    for cat in CATEGORIES {
        let g: Vec<usize> = gold.iter().map(|l| l.get(cat) as usize).collect();
        let p: Vec<usize> = pred.iter().map(|l| l.get(cat) as usize).collect();
        scores[cat.index()] = macro_f1(&g, &p, cat.class_count())?;
    }
    Ok(scores)
}

fn accuracy_scores(
    model: &Model,
    samples: &[MemeSample],
    cache: Option<&[Vec<f32>]>,
) -> Result<[f64; 5]> {
    let mut acc = [0.0f64; 5];
    for (i, s) in samples.iter().enumerate() {
        let outputs = match cache {
            Some(features) => heads_eval_on_features(model, &features[i])?,
            None => model.predict(s)?,
        };
        let pred = outputs.predicted_labels();
        for cat in CATEGORIES {
            if pred.get(cat) == s.labels.get(cat) {
                acc[cat.index()] += 1.0;
            }
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn heads_eval_on_features(model: &Model, features: &[f32]) -> Result<HeadOutputs> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(&model.params);
    let f = tape.leaf(&[features.len()], features)?;
    let mut rng = Rng::seed_from(0);
    let vars = heads_forward_on_tape(
        &mut tape,
        &mut binder,
        &model.params,
        &model.heads,
        f,
        false,
        &mut rng,
    )?;
    Ok(HeadOutputs::from_tape(&tape, vars))
}

fn non_finite_head(report: &LossReport) -> Option<&'static str> {
    for cat in CATEGORIES {
        if !report.get(cat).is_finite() {
            return Some(cat.name());
        }
    }
    if !report.total.is_finite() {
        return Some("total");
    }
    None
}

/// Train both phases and leave the overall best parameters in the model.
pub fn train_two_phase(
    model: &mut Model,
    train: &[MemeSample],
    val: &[MemeSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_two_phase_with(model, train, val, config, TrainOptions::default())
}

pub fn train_two_phase_with(
    model: &mut Model,
    train: &[MemeSample],
    val: &[MemeSample],
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    // class weights come from the training portion only
    let weights = compute_class_weights(&ClassCounts::from_samples(train))?;

    let resume = match options.resume_from {
        Some(path) => Some(read_resume(path, model, config.patience)?),
        None => None,
    };

    let mut log = Vec::new();
    let mut halted = false;
    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.max_epochs_per_phase as u64;

    // carried across phases
    let (mut rng, mut stopper, mut best) = match &resume {
        Some(r) => (r.rng.clone(), r.stopper.clone(), r.best.clone()),
        None => (
            Rng::seed_from(config.seed),
            EarlyStopper::new(config.patience),
            snapshot(model),
        ),
    };

    'phases: for phase in [Phase::Frozen, Phase::Unfrozen] {
        if let Some(only) = options.only_phase {
            if phase != only {
                continue;
            }
        }
        if let Some(r) = &resume {
            if phase.index() < r.phase.index() {
                continue;
            }
        }
        set_phase(model, phase);
        let mut opt_config = config.optimizer.clone();
        opt_config.peak_lr = config.phase_lr(phase);
        opt_config.validate()?;

        let resuming_here = resume.as_ref().is_some_and(|r| r.phase == phase);
        let mut optimizer = match (&resume, resuming_here) {
            (Some(r), true) => r.optimizer.clone(),
            _ => OptimizerState::new(opt_config.kind, &model.params),
        };
        let start_epoch = if resuming_here {
            resume.as_ref().unwrap().epoch
        } else {
            0
        };
        let mut global_step = if resuming_here {
            resume.as_ref().unwrap().global_step
        } else {
            0
        };
        if !resuming_here && phase == Phase::Unfrozen {
            // phase 2 applies its own patience budget against the carried best
            stopper.epochs_since_improvement = 0;
        }

        // cache pooled encoder features while the encoders cannot change
        let use_cache = phase == Phase::Frozen && config.cache_frozen_features;
        let (train_cache, val_cache) = if use_cache {
            let tc: Result<Vec<Vec<f32>>> = train.iter().map(|s| model.features(s)).collect();
            let vc: Result<Vec<Vec<f32>>> = val.iter().map(|s| model.features(s)).collect();
            (Some(tc?), Some(vc?))
        } else {
            (None, None)
        };

        for epoch in start_epoch + 1..=config.max_epochs_per_phase {
            let mut order: Vec<usize> = (0..train.len()).collect();
            rng.shuffle(&mut order);
            let mut epoch_reports = Vec::with_capacity(train.len());
            let mut last_lr = 0.0f64;

            for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
                model.params.clear_grads();
                let scale = 1.0 / batch.len() as f32;
                for &i in batch {
                    let sample = &train[i];
                    let mut tape = Tape::new();
                    let mut binder = ParamBinder::new(&model.params);
                    let head_vars = match &train_cache {
                        Some(features) => {
                            let f = tape.leaf(&[features[i].len()], &features[i])?;
                            heads_forward_on_tape(
                                &mut tape,
                                &mut binder,
                                &model.params,
                                &model.heads,
                                f,
                                true,
                                &mut rng,
                            )?
                        }
                        None => model.forward_on_tape(&mut tape, &mut binder, sample, true, &mut rng)?,
                    };
                    let (loss_var, report) =
                        total_loss_on_tape(&mut tape, head_vars, &sample.labels, &weights)?;
                    if let Some(head) = non_finite_head(&report) {
                        return Err(Error::NonFinite {
                            head,
                            batch: batch_index,
                            epoch,
                        });
                    }
                    epoch_reports.push(report);
                    tape.backward(loss_var)?;
                    binder.accumulate_grads(&tape, &mut model.params, scale)?;
                }
                global_step += 1;
                last_lr = lr_at_step(global_step, total_steps, &opt_config)?;
                optimizer_step(&mut model.params, &mut optimizer, &opt_config, last_lr)?;
            }

            let val_f1 = validate_scores(model, val, val_cache.as_deref())?;
            let monitored = val_f1.iter().sum::<f64>() / 5.0;
            let train_accuracy = if options.track_train_accuracy {
                Some(accuracy_scores(model, train, train_cache.as_deref())?)
            } else {
                None
            };
            let mean_loss = LossReport::mean(&epoch_reports);
            let entry = EpochLog {
                epoch,
                phase,
                lr: last_lr,
                train_losses: mean_loss.per_head,
                val_f1,
                monitored,
                train_accuracy,
            };
            let decision = stopper.observe(monitored);
            if decision == StopDecision::Improved {
                best = snapshot(model);
                if let Some(dir) = options.checkpoint_dir {
                    let mut current = model.clone();
                    restore(&mut current, &best)?;
                    crate::checkpoint::save_model(&dir.join("best.ckpt"), &current)?;
                }
            }
            if let Some(dir) = options.checkpoint_dir {
                write_last_checkpoint(
                    dir,
                    model,
                    phase,
                    epoch,
                    global_step,
                    &stopper,
                    &rng,
                    &optimizer,
                    &best,
                )?;
            }
            let keep_going = match &mut options.on_epoch {
                Some(callback) => callback(&entry),
                None => true,
            };
            log.push(entry);
            if options.halt_after == Some((phase, epoch)) {
                halted = true;
                break 'phases;
            }
            if decision == StopDecision::Stop || !keep_going {
                break;
            }
        }

        // reload the best checkpoint before the next phase (and at the end)
        restore(model, &best)?;
    }

    if !halted {
        restore(model, &best)?;
    }
    Ok(TrainOutcome {
        log,
        best_metric: stopper.best,
        halted,
    })
}
