//! Loss functions, class weighting, the warm-up learning-rate schedule, and
//! the two optimizers (Adam with decoupled weight decay, and its LAMB
//! variant with layerwise trust ratios).

use crate::data::{Category, LabelSet, MemeSample, CATEGORIES};
use crate::error::{Error, Result};
use crate::fusion::{HeadOutputs, HeadVars};
use crate::params::ParamSet;
use crate::tensor::{Tape, Var, LOG_FLOOR};

// ---- losses ----

/// Unweighted categorical cross-entropy of one prediction, at 64-bit
/// precision: -ln(max(p[label], 1e-12)).
pub fn cross_entropy(probs: &[f32], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let p = probs[label] as f64;
    // NaN must survive the floor so callers can detect poisoned outputs
    let floored = if p.is_nan() { p } else { p.max(LOG_FLOOR) };
    Ok(-floored.ln())
}

/// Class-weighted categorical cross-entropy: -w[label] * ln(max(p, 1e-12)).
pub fn weighted_cross_entropy(probs: &[f32], label: usize, weights: &[f32]) -> Result<f64> {
    if weights.len() != probs.len() {
        return Err(Error::Input(format!(
            "{} class weights for {} classes",
            weights.len(),
            probs.len()
        )));
    }
    let unweighted = cross_entropy(probs, label)?;
    Ok(weights[label] as f64 * unweighted)
}

/// Per-class loss weights for each of the five heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    per_head: [Vec<f32>; 5],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights {
            per_head: CATEGORIES.map(|c| vec![1.0; c.class_count()]),
        }
    }

    pub fn get(&self, cat: Category) -> &[f32] {
        &self.per_head[cat.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for cat in CATEGORIES {
            let w = self.get(cat);
            if w.len() != cat.class_count() {
                return Err(Error::Input(format!(
                    "{} weights for {} {} classes",
                    w.len(),
                    cat.class_count(),
                    cat.name()
                )));
            }
            if w.iter().any(|&x| !x.is_finite() || x <= 0.0) {
                return Err(Error::Input(format!("non-positive {} class weight", cat.name())));
            }
        }
        Ok(())
    }
}

/// Per-head label histograms.
#[derive(Debug, Clone, Default)]
pub struct ClassCounts {
    per_head: [Vec<u64>; 5],
}

impl ClassCounts {
    pub fn new() -> Self {
        ClassCounts {
            per_head: CATEGORIES.map(|c| vec![0; c.class_count()]),
        }
    }

    pub fn count(&mut self, labels: &LabelSet) {
        for cat in CATEGORIES {
            self.per_head[cat.index()][labels.get(cat) as usize] += 1;
        }
    }

    pub fn from_samples(samples: &[MemeSample]) -> Self {
        let mut counts = ClassCounts::new();
        for s in samples {
            counts.count(&s.labels);
        }
        counts
    }

    pub fn get(&self, cat: Category) -> &[u64] {
        &self.per_head[cat.index()]
    }
}

const WEIGHT_CLIP: (f32, f32) = (0.1, 10.0);

/// Inverse-frequency weights w_c = N / (K * max(n_c, 1)), clipped to
/// [0.1, 10]. Balanced classes come out at exactly 1.
pub fn compute_class_weights(counts: &ClassCounts) -> Result<ClassWeights> {
    let mut per_head = CATEGORIES.map(|c| vec![0.0f32; c.class_count()]);
    for cat in CATEGORIES {
        let hist = counts.get(cat);
        let total: u64 = hist.iter().sum();
        if total == 0 {
            return Err(Error::Input(format!("empty {} histogram", cat.name())));
        }
        let k = cat.class_count() as f64;
        for (c, &n) in hist.iter().enumerate() {
            let w = total as f64 / (k * (n.max(1)) as f64);
            per_head[cat.index()][c] = (w as f32).clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1);
        }
    }
    let weights = ClassWeights { per_head };
    weights.validate()?;
    Ok(weights)
}

/// Per-head losses plus their sum (the heads weigh equally in the total).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub per_head: [f64; 5],
    pub total: f64,
}

impl LossReport {
    pub fn zero() -> Self {
        LossReport {
            per_head: [0.0; 5],
            total: 0.0,
        }
    }

    pub fn get(&self, cat: Category) -> f64 {
        self.per_head[cat.index()]
    }

    /// Mean of several reports (batch averaging).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut per_head = [0.0f64; 5];
        for r in reports {
            for (acc, v) in per_head.iter_mut().zip(r.per_head) {
                *acc += v;
            }
        }
        per_head.iter_mut().for_each(|v| *v /= n);
        LossReport {
            per_head,
            total: per_head.iter().sum(),
        }
    }
}

/// Sum of the five weighted head losses for one sample.
pub fn total_loss(
    outputs: &HeadOutputs,
    labels: &LabelSet,
    weights: &ClassWeights,
) -> Result<LossReport> {
    let mut per_head = [0.0f64; 5];
    for cat in CATEGORIES {
        per_head[cat.index()] = weighted_cross_entropy(
            outputs.get(cat),
            labels.get(cat) as usize,
            weights.get(cat),
        )?;
    }
    Ok(LossReport {
        per_head,
        total: per_head.iter().sum(),
    })
}

/// Tape version: returns the scalar total-loss var for backward plus the
/// report.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    vars: HeadVars,
    labels: &LabelSet,
    weights: &ClassWeights,
) -> Result<(Var, LossReport)> {
    let mut terms = Vec::with_capacity(5);
    let mut per_head = [0.0f64; 5];
    for cat in CATEGORIES {
        let label = labels.get(cat) as usize;
        let row = weights.get(cat);
        if label >= row.len() {
            return Err(Error::Input(format!(
                "{} label {label} out of range",
                cat.name()
            )));
        }
        let probs = tape.value(vars.get(cat)).to_vec();
        per_head[cat.index()] = weighted_cross_entropy(&probs, label, row)?;
        terms.push(tape.neg_log_pick(vars.get(cat), label, row[label])?);
    }
    let total = tape.add_n(&terms)?;
    Ok((
        total,
        LossReport {
            per_head,
            total: per_head.iter().sum(),
        },
    ))
}

// ---- learning-rate schedule ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Lamb,
    AdamWeightDecay,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Lamb => "lamb",
            OptimizerKind::AdamWeightDecay => "adamw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lamb" => Ok(OptimizerKind::Lamb),
            "adamw" => Ok(OptimizerKind::AdamWeightDecay),
            other => Err(Error::Input(format!(
                "unknown optimizer `{other}` (expected lamb or adamw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f32,
    pub epsilon: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Off by default: hold peak after warm-up. On: decay linearly to zero
    /// by the final step.
    pub decay_after_warmup: bool,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, peak_lr: f64) -> Self {
        OptimizerConfig {
            kind,
            peak_lr,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            epsilon: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            decay_after_warmup: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !self.warmup_fraction.is_finite()
            || self.warmup_fraction <= 0.0
            || self.warmup_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total_steps`: linear ramp from zero over the
/// first ceil(warmup_fraction * total_steps) steps, exactly peak at the
/// boundary, then constant (or linear decay behind the config flag).
pub fn lr_at_step(step: u64, total_steps: u64, config: &OptimizerConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Input(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as u64;
    if warmup == 0 {
        return Ok(config.peak_lr);
    }
    if step < warmup {
        return Ok(config.peak_lr * (step as f64 / warmup as f64));
    }
    if config.decay_after_warmup && total_steps > warmup {
        let remaining = (total_steps - step) as f64 / (total_steps - warmup) as f64;
        return Ok(config.peak_lr * remaining);
    }
    Ok(config.peak_lr)
}

// ---- optimizers ----

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam moments for every parameter entry, in ParamSet order, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        OptimizerState {
            kind,
            step: 0,
            moments: params
                .iter()
                .map(|(_, p)| Moments {
                    m: vec![0.0; p.tensor.numel()],
                    v: vec![0.0; p.tensor.numel()],
                })
                .collect(),
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} tensors, model has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for ((_, p), m) in params.iter().zip(&self.moments) {
            if m.m.len() != p.tensor.numel() || m.v.len() != p.tensor.numel() {
                return Err(Error::Contract(format!(
                    "optimizer moments for {} have wrong size",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// One update over every trainable parameter with a gradient. `lamb` adds
/// the layerwise trust ratio ||p|| / ||u|| on top of the AdamW update u.
fn step_impl(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
    lamb: bool,
) -> Result<()> {
    config.validate()?;
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let lr = lr as f32;

    for (idx, (_, param)) in params.iter_mut().enumerate() {
        if !param.tensor.is_trainable() {
            continue;
        }
        let Some(grad) = param.tensor.grad() else {
            continue;
        };
        let grad = grad.to_vec();
        let moments = &mut state.moments[idx];
        let mut update = vec![0.0f32; grad.len()];
        for (j, &g) in grad.iter().enumerate() {
            let m = config.beta1 * moments.m[j] + (1.0 - config.beta1) * g;
            let v = config.beta2 * moments.v[j] + (1.0 - config.beta2) * g * g;
            moments.m[j] = m;
            moments.v[j] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            update[j] = m_hat / (v_hat.sqrt() + config.epsilon);
        }
        if config.weight_decay > 0.0 && !param.decay_exempt {
            for (u, p) in update.iter_mut().zip(param.tensor.values()) {
                *u += config.weight_decay * p;
            }
        }
        let scale = if lamb {
            let p_norm = l2_norm(param.tensor.values());
            let u_norm = l2_norm(&update);
            if p_norm > 0.0 && u_norm > 0.0 {
                (p_norm / u_norm) as f32
            } else {
                1.0
            }
        } else {
            1.0
        };
        let values = param.tensor.values_mut();
        for (p, u) in values.iter_mut().zip(&update) {
            *p -= lr * scale * u;
        }
    }
    Ok(())
}

fn l2_norm(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Bias-corrected Adam with decoupled weight decay:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
/// Biases and normalization parameters are exempt from the decay term.
pub fn adamw_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    step_impl(params, state, config, lr, false)
}

/// LAMB: the AdamW update scaled per tensor by ||p|| / ||u||; the ratio is
/// 1 whenever either norm is zero.
pub fn lamb_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    step_impl(params, state, config, lr, true)
}

/// Dispatch on the configured optimizer kind.
pub fn optimizer_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    match config.kind {
        OptimizerKind::Lamb => lamb_step(params, state, config, lr),
        OptimizerKind::AdamWeightDecay => adamw_step(params, state, config, lr),
    }
}
