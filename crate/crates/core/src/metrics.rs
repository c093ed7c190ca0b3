//! Macro-F1 evaluation and the three-subtask competition report.

use std::fmt::Write as _;

use crate::data::{Category, LabelSet, MemeSample, CATEGORIES};
use crate::error::{Error, Result};
use crate::fusion::Model;

/// K x K counts, rows = gold, cols = predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_labels(gold: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::Input("cannot score an empty label list".into()));
        }
        if gold.len() != pred.len() {
            return Err(Error::Input(format!(
                "{} gold labels vs {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        let mut m = ConfusionMatrix::new(k);
        for (&g, &p) in gold.iter().zip(pred) {
            if g >= k || p >= k {
                return Err(Error::Input(format!(
                    "label {} outside 0..{k}",
                    g.max(p)
                )));
            }
            m.counts[g * k + p] += 1;
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn class_stats(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..self.k {
            if other != c {
                fp += self.get(other, c);
                fn_ += self.get(c, other);
            }
        }
        (tp, fp, fn_)
    }

    /// Per-class F1 = 2PR/(P+R), zero when both precision and recall are
    /// undefined or zero. Classes absent from gold and predictions still
    /// contribute a zero.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.k)
            .map(|c| {
                let (tp, fp, fn_) = self.class_stats(c);
                let p_den = tp + fp;
                let r_den = tp + fn_;
                if p_den == 0 || r_den == 0 {
                    return 0.0;
                }
                let p = tp as f64 / p_den as f64;
                let r = tp as f64 / r_den as f64;
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let per = self.per_class_f1();
        per.iter().sum::<f64>() / self.k as f64
    }
}

/// Mean over all K classes of the per-class F1.
///
/// ```
/// use memefuse_core::metrics::macro_f1;
///
/// let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap();
/// assert!((f1 - 0.5).abs() < 1e-12);
/// ```
pub fn macro_f1(gold: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    Ok(ConfusionMatrix::from_labels(gold, pred, k)?.macro_f1())
}

/// Argmax-decode every sample and compute per-head macro F1, in canonical
/// category order. Deterministic in eval mode.
pub fn evaluate_model(model: &Model, samples: &[MemeSample]) -> Result<[f64; 5]> {
    let (gold, pred) = predict_all(model, samples)?;
    let mut scores = [0.0f64; 5];
    for cat in CATEGORIES {
        let g: Vec<usize> = gold.iter().map(|l| l.get(cat) as usize).collect();
        let p: Vec<usize> = pred.iter().map(|l| l.get(cat) as usize).collect();
        scores[cat.index()] = macro_f1(&g, &p, cat.class_count())?;
    }
    Ok(scores)
}

/// Per-head accuracy (fraction of exact label matches).
pub fn evaluate_accuracy(model: &Model, samples: &[MemeSample]) -> Result<[f64; 5]> {
    let (gold, pred) = predict_all(model, samples)?;
    let n = gold.len() as f64;
    let mut acc = [0.0f64; 5];
    for cat in CATEGORIES {
        let hits = gold
            .iter()
            .zip(&pred)
            .filter(|(g, p)| g.get(cat) == p.get(cat))
            .count();
        acc[cat.index()] = hits as f64 / n;
    }
    Ok(acc)
}

fn predict_all(model: &Model, samples: &[MemeSample]) -> Result<(Vec<LabelSet>, Vec<LabelSet>)> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on zero samples".into()));
    }
    let mut gold = Vec::with_capacity(samples.len());
    let mut pred = Vec::with_capacity(samples.len());
    for s in samples {
        gold.push(s.labels);
        pred.push(model.predict(s)?.predicted_labels());
    }
    Ok((gold, pred))
}

/// The four categories scored in subtasks B and C (sentiment is subtask A).
pub const BC_CATEGORIES: [Category; 4] = [
    Category::Humor,
    Category::Sarcasm,
    Category::Offense,
    Category::Motivation,
];

/// Scores in the competition's three-subtask format, with per-category
/// breakdowns.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionReport {
    /// Sentiment macro F1.
    pub subtask_a: f64,
    /// Mean of the four coarse (binary) category macro F1 scores.
    pub subtask_b: f64,
    /// Mean of the four fine-scale category macro F1 scores.
    pub subtask_c: f64,
    /// Fine macro F1 per category, in BC_CATEGORIES order.
    pub fine: [f64; 4],
    /// Coarse macro F1 per category, in BC_CATEGORIES order.
    pub coarse: [f64; 4],
}

/// Score fine-grained predictions. Subtask B derives from the same heads by
/// coarsening both gold and predicted labels before scoring.
pub fn competition_scores(gold: &[LabelSet], pred: &[LabelSet]) -> Result<CompetitionReport> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!(
            "{} gold label sets vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let sentiment_gold: Vec<usize> = gold.iter().map(|l| l.sentiment as usize).collect();
    let sentiment_pred: Vec<usize> = pred.iter().map(|l| l.sentiment as usize).collect();
    let subtask_a = macro_f1(&sentiment_gold, &sentiment_pred, 3)?;

    let mut fine = [0.0f64; 4];
    let mut coarse = [0.0f64; 4];
    for (i, cat) in BC_CATEGORIES.iter().enumerate() {
        let g: Vec<usize> = gold.iter().map(|l| l.get(*cat) as usize).collect();
        let p: Vec<usize> = pred.iter().map(|l| l.get(*cat) as usize).collect();
        fine[i] = macro_f1(&g, &p, cat.class_count())?;
        let gc: Vec<usize> = gold
            .iter()
            .map(|l| LabelSet::coarse_value(*cat, l.get(*cat)) as usize)
            .collect();
        let pc: Vec<usize> = pred
            .iter()
            .map(|l| LabelSet::coarse_value(*cat, l.get(*cat)) as usize)
            .collect();
        coarse[i] = macro_f1(&gc, &pc, 2)?;
    }
    Ok(CompetitionReport {
        subtask_a,
        subtask_b: coarse.iter().sum::<f64>() / 4.0,
        subtask_c: fine.iter().sum::<f64>() / 4.0,
        fine,
        coarse,
    })
}

impl CompetitionReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "subtask A (sentiment)      {:.4}", self.subtask_a);
        let _ = writeln!(out, "subtask B (binary mean)    {:.4}", self.subtask_b);
        let _ = writeln!(out, "subtask C (fine mean)      {:.4}", self.subtask_c);
        let _ = writeln!(out, "per category (fine / coarse):");
        for (i, cat) in BC_CATEGORIES.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {:<12} {:.4} / {:.4}",
                cat.name(),
                self.fine[i],
                self.coarse[i]
            );
        }
        out
    }

    /// Machine-readable lines: name<TAB>value.
    pub fn to_machine(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "subtask_a\t{:.6}", self.subtask_a);
        let _ = writeln!(out, "subtask_b\t{:.6}", self.subtask_b);
        let _ = writeln!(out, "subtask_c\t{:.6}", self.subtask_c);
        for (i, cat) in BC_CATEGORIES.iter().enumerate() {
            let _ = writeln!(out, "fine_{}\t{:.6}", cat.name(), self.fine[i]);
            let _ = writeln!(out, "coarse_{}\t{:.6}", cat.name(), self.coarse[i]);
        }
        out
    }
}

/// Validation scores reported by the system this implementation is modeled
/// after (SemEval-2020 Task 8 test set): subtasks A, B, C. Reference
/// constants only; reproducing them needs the original dataset and
/// pretrained encoders, neither of which ships here.
pub const REFERENCE_TEST_SCORES: (f64, f64, f64) = (0.3453, 0.5183, 0.3171);
