//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at every coordinate of `x`.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: &F, x: &Tensor, epsilon: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Input(format!("epsilon {epsilon} must be positive")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.shape(), x.values())?;
    let y = f(&mut tape, leaf)?;
    if tape.numel(y) != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<f32> = tape
        .grad(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    finite_diff_check_against(f, x, &analytic, epsilon)
}

/// Full-model sweep variant for composed forward passes, where a single
/// probe step cannot serve every coordinate: f32 loss quantization demands
/// large steps for small-derivative coordinates while truncation demands
/// small steps for large-derivative ones. Each coordinate is therefore
/// scored against central differences at eps, 2eps, 4eps and 8eps plus the
/// Richardson extrapolations of adjacent pairs, taking the best agreement;
/// every estimator converges to the true derivative, so a wrong analytic
/// gradient disagrees with all of them. Coordinates whose analytic value
/// and every difference quotient sit below `resolution_floor` cannot be
/// measured at 32-bit precision and are counted as skipped. Returns
/// (worst error over resolvable coordinates, resolvable, skipped).
pub fn finite_diff_check_floored<F>(
    f: &F,
    x: &Tensor,
    epsilon: f32,
    resolution_floor: f64,
) -> Result<(f64, usize, usize)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Input(format!("epsilon {epsilon} must be positive")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.shape(), x.values())?;
    let y = f(&mut tape, leaf)?;
    if tape.numel(y) != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<f32> = tape
        .grad(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut resolvable = 0usize;
    let mut skipped = 0usize;
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        let central = |eps: f32, probe: &mut Vec<f32>| -> Result<f64> {
            probe[i] = orig + eps;
            let up = eval_scalar(f, x.shape(), probe)?;
            probe[i] = orig - eps;
            let down = eval_scalar(f, x.shape(), probe)?;
            probe[i] = orig;
            Ok((up - down) / (2.0 * eps as f64))
        };
        let quotients = [
            central(0.25 * epsilon, &mut probe)?,
            central(0.5 * epsilon, &mut probe)?,
            central(epsilon, &mut probe)?,
            central(2.0 * epsilon, &mut probe)?,
            central(4.0 * epsilon, &mut probe)?,
            central(8.0 * epsilon, &mut probe)?,
        ];
        let mut estimates = quotients.to_vec();
        for pair in quotients.windows(2) {
            // Richardson: cancel the eps^2 truncation term
            estimates.push((4.0 * pair[0] - pair[1]) / 3.0);
        }
        let a = analytic[i] as f64;
        let best_signal = estimates.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if a.abs().max(best_signal) < resolution_floor {
            skipped += 1;
            continue;
        }
        resolvable += 1;
        let err = estimates
            .iter()
            .map(|d| (a - d).abs() / a.abs().max(d.abs()).max(1e-8))
            .fold(f64::INFINITY, f64::min);
        if err > worst {
            worst = err;
        }
    }
    Ok((worst, resolvable, skipped))
}

/// Like [`finite_diff_check`] but compares against a supplied gradient
/// instead of the tape's. Lets tests inject a wrong gradient and confirm the
/// checker flags it.
pub fn finite_diff_check_against<F>(
    f: &F,
    x: &Tensor,
    analytic: &[f32],
    epsilon: f32,
) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Input(format!("epsilon {epsilon} must be positive")));
    }
    let mut worst = 0.0f64;
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = eval_scalar(f, x.shape(), &probe)?;
        probe[i] = orig - epsilon;
        let down = eval_scalar(f, x.shape(), &probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon as f64);
        let a = analytic[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

fn eval_scalar<F>(f: &F, shape: &[usize], values: &[f32]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(shape, values)?;
    let y = f(&mut tape, leaf)?;
    Ok(tape.value(y)[0] as f64)
}

/// Worst finite-difference error observed for one op over all seeded cases.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub worst: f64,
}

/// Reduce an op output to a scalar through a fixed random weighting so the
/// check is sensitive to every output coordinate.
fn weighted_sum(tape: &mut Tape, v: Var, weights: &[f32]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.leaf(&shape, weights)?;
    let prod = tape.mul(v, w)?;
    Ok(tape.sum_all(prod))
}

fn rand_vec(rng: &mut Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Magnitudes in [0.5, 1.5] with random signs: bounded away from zero.
fn rand_vec_off_zero(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform(0.5, 1.5);
            if rng.next_f32() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

/// Well-separated values so max-pool argmaxes are stable under the probe.
fn rand_vec_separated(rng: &mut Rng, n: usize) -> Vec<f32> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut out = vec![0.0f32; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank as f32 * 0.1;
    }
    out
}

/// Layer-norm probe rows built so that every input/gain gradient coordinate
/// is bounded away from zero: per-4 blocks [+m,+m,-m,-m] keep the row mean
/// exactly zero and nearly orthogonal to the alternating reduction weights,
/// with a small alternating leak so the correlation term still participates.
fn layer_norm_probe_row(rng: &mut Rng, cols: usize) -> Vec<f32> {
    debug_assert_eq!(cols % 4, 0);
    let mut row = Vec::with_capacity(cols);
    for _ in 0..cols / 4 {
        let m = rng.uniform(0.5, 1.5);
        row.extend_from_slice(&[m, m, -m, -m]);
    }
    for (j, v) in row.iter_mut().enumerate() {
        *v += 0.05 * if j % 2 == 0 { 1.0 } else { -1.0 };
    }
    row
}

fn alternating_weights(rng: &mut Rng, n: usize) -> Vec<f32> {
    let c = rng.uniform(0.5, 1.5);
    (0..n)
        .map(|j| if j % 2 == 0 { c } else { -c })
        .collect()
}

/// Run the finite-difference suite over every differentiable op, `cases`
/// seeded cases each. `base_seed` varies the inputs deterministically.
///
/// Input and reduction-weight distributions are chosen so that every checked
/// gradient coordinate is bounded away from zero; at 32-bit forward precision
/// a coordinate whose true derivative is ~1e-3 cannot be resolved by central
/// differences, so conditioning is part of each case's construction.
pub fn gradcheck_suite(cases: usize, epsilon: f32, base_seed: u64) -> Result<Vec<OpCheck>> {
    let mut reports = Vec::new();

    type Runner = Box<dyn Fn(&mut Rng, f32) -> Result<f64>>;
    let checks: Vec<(&'static str, Runner)> = vec![
        ("matmul_lhs", Box::new(|rng, eps| {
            let x = Tensor::new(&[2, 3], rand_vec(rng, 6, -1.0, 1.0))?;
            let b = rand_vec(rng, 6, 0.2, 1.2);
            let w = rand_vec(rng, 4, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[3, 2], &b)?;
                let y = t.matmul(v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("matmul_rhs", Box::new(|rng, eps| {
            let a = rand_vec(rng, 6, 0.2, 1.2);
            let x = Tensor::new(&[3, 2], rand_vec(rng, 6, -1.0, 1.0))?;
            let w = rand_vec(rng, 4, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let av = t.leaf(&[2, 3], &a)?;
                let y = t.matmul(av, v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("matmul_nt_lhs", Box::new(|rng, eps| {
            let x = Tensor::new(&[2, 3], rand_vec(rng, 6, -1.0, 1.0))?;
            let b = rand_vec(rng, 12, 0.2, 1.2);
            let w = rand_vec(rng, 8, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[4, 3], &b)?;
                let y = t.matmul_nt(v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("matmul_nt_rhs", Box::new(|rng, eps| {
            let a = rand_vec(rng, 6, 0.2, 1.2);
            let x = Tensor::new(&[4, 3], rand_vec(rng, 12, -1.0, 1.0))?;
            let w = rand_vec(rng, 8, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let av = t.leaf(&[2, 3], &a)?;
                let y = t.matmul_nt(av, v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("add", Box::new(|rng, eps| {
            let x = Tensor::new(&[6], rand_vec(rng, 6, -1.0, 1.0))?;
            let b = rand_vec(rng, 6, -1.0, 1.0);
            let w = rand_vec(rng, 6, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[6], &b)?;
                let y = t.add(v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("add_row_vec_matrix", Box::new(|rng, eps| {
            let x = Tensor::new(&[3, 4], rand_vec(rng, 12, -1.0, 1.0))?;
            let b = rand_vec(rng, 4, -1.0, 1.0);
            let w = rand_vec(rng, 12, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[4], &b)?;
                let y = t.add_row_vec(v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("add_row_vec_vector", Box::new(|rng, eps| {
            let a = rand_vec(rng, 12, -1.0, 1.0);
            let x = Tensor::new(&[4], rand_vec(rng, 4, -1.0, 1.0))?;
            let w = rand_vec(rng, 12, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let av = t.leaf(&[3, 4], &a)?;
                let y = t.add_row_vec(av, v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("scale", Box::new(|rng, eps| {
            let x = Tensor::new(&[8], rand_vec(rng, 8, -1.0, 1.0))?;
            let mag = rng.uniform(0.5, 2.0);
            let c = if rng.next_f32() < 0.5 { -mag } else { mag };
            let w = rand_vec(rng, 8, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.scale(v, c);
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("mul", Box::new(|rng, eps| {
            let x = Tensor::new(&[8], rand_vec(rng, 8, -1.0, 1.0))?;
            let b = rand_vec_off_zero(rng, 8);
            let w = rand_vec(rng, 8, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[8], &b)?;
                let y = t.mul(v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("relu", Box::new(|rng, eps| {
            let x = Tensor::new(&[12], rand_vec_off_zero(rng, 12))?;
            let w = rand_vec(rng, 12, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.relu(v);
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("gelu", Box::new(|rng, eps| {
            // positive inputs keep the derivative above ~0.58; the negative
            // branch has a zero crossing that central differences cannot
            // resolve at f32
            let x = Tensor::new(&[12], rand_vec(rng, 12, 0.1, 2.0))?;
            let w = rand_vec(rng, 12, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.gelu(v);
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("tanh", Box::new(|rng, eps| {
            let x = Tensor::new(&[12], rand_vec(rng, 12, -1.5, 1.5))?;
            let w = rand_vec(rng, 12, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.tanh(v);
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("softmax", Box::new(|rng, eps| {
            // reduce through a picked log-probability: every coordinate of
            // the input gradient is then p_j or p_label - 1, both bounded
            let x = Tensor::new(&[3], rand_vec(rng, 3, -0.5, 0.5))?;
            let label = rng.index(3);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.softmax_rows(v)?;
                t.neg_log_pick(y, label, 1.0)
            }, &x, eps)
        })),
        ("layer_norm_input", Box::new(|rng, eps| {
            let cols = 16;
            let mut vals = layer_norm_probe_row(rng, cols);
            vals.extend(layer_norm_probe_row(rng, cols));
            let x = Tensor::new(&[2, cols], vals)?;
            let g = vec![1.0f32; cols];
            let b = rand_vec(rng, cols, -0.5, 0.5);
            let mut w = alternating_weights(rng, cols);
            w.extend(alternating_weights(rng, cols));
            finite_diff_check(&move |t: &mut Tape, v| {
                let gv = t.leaf(&[cols], &g)?;
                let bv = t.leaf(&[cols], &b)?;
                let y = t.layer_norm_rows(v, gv, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("layer_norm_gain", Box::new(|rng, eps| {
            let cols = 16;
            let a = layer_norm_probe_row(rng, cols);
            let x = Tensor::new(&[cols], rand_vec(rng, cols, 0.5, 1.5))?;
            let b = rand_vec(rng, cols, -0.5, 0.5);
            let w = rand_vec(rng, cols, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let av = t.leaf(&[1, cols], &a)?;
                let bv = t.leaf(&[cols], &b)?;
                let y = t.layer_norm_rows(av, v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("layer_norm_bias", Box::new(|rng, eps| {
            let cols = 16;
            let a = layer_norm_probe_row(rng, cols);
            let g = rand_vec(rng, cols, 0.5, 1.5);
            let x = Tensor::new(&[cols], rand_vec(rng, cols, -0.5, 0.5))?;
            let w = rand_vec(rng, cols, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let av = t.leaf(&[1, cols], &a)?;
                let gv = t.leaf(&[cols], &g)?;
                let y = t.layer_norm_rows(av, gv, v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("dropout_train", Box::new(|rng, eps| {
            let x = Tensor::new(&[20], rand_vec(rng, 20, -1.0, 1.0))?;
            let w = rand_vec(rng, 20, 0.5, 1.5);
            let mask_seed = rng.next_u64();
            // Re-seeding per call keeps the mask fixed across probe evals.
            finite_diff_check(&move |t: &mut Tape, v| {
                let mut mask_rng = Rng::seed_from(mask_seed);
                let y = t.dropout(v, 0.3, true, &mut mask_rng)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("concat_cols", Box::new(|rng, eps| {
            let x = Tensor::new(&[2, 3], rand_vec(rng, 6, -1.0, 1.0))?;
            let b = rand_vec(rng, 8, -1.0, 1.0);
            let w = rand_vec(rng, 14, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[2, 4], &b)?;
                let y = t.concat_cols(&[v, bv])?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("slice_cols", Box::new(|rng, eps| {
            let x = Tensor::new(&[3, 6], rand_vec(rng, 18, -1.0, 1.0))?;
            let w = rand_vec(rng, 9, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.slice_cols(v, 2, 3)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("slice_rows", Box::new(|rng, eps| {
            let x = Tensor::new(&[4, 3], rand_vec(rng, 12, -1.0, 1.0))?;
            let w = rand_vec(rng, 3, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.slice_rows(v, 1, 1)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("embedding_table", Box::new(|rng, eps| {
            let x = Tensor::new(&[5, 4], rand_vec(rng, 20, -1.0, 1.0))?;
            let ids = vec![3u32, 0, 3, 1];
            let w = rand_vec(rng, 16, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.embedding(v, &ids)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("conv2d_input", Box::new(|rng, eps| {
            // positive kernels and weights keep the scatter sums bounded
            let x = Tensor::new(&[2, 4, 4], rand_vec(rng, 32, -1.0, 1.0))?;
            let k = rand_vec(rng, 3 * 2 * 9, 0.2, 0.7);
            let b = rand_vec(rng, 3, -0.5, 0.5);
            let w = rand_vec(rng, 48, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let kv = t.leaf(&[3, 2, 3, 3], &k)?;
                let bv = t.leaf(&[3], &b)?;
                let y = t.conv2d(v, kv, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("conv2d_kernels", Box::new(|rng, eps| {
            let xv = rand_vec(rng, 32, 0.1, 1.0);
            let x = Tensor::new(&[3, 2, 3, 3], rand_vec(rng, 54, -0.5, 0.5))?;
            let b = rand_vec(rng, 3, -0.5, 0.5);
            let w = rand_vec(rng, 48, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let iv = t.leaf(&[2, 4, 4], &xv)?;
                let bv = t.leaf(&[3], &b)?;
                let y = t.conv2d(iv, v, bv)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("conv2d_bias", Box::new(|rng, eps| {
            let xv = rand_vec(rng, 32, -1.0, 1.0);
            let k = rand_vec(rng, 54, -0.5, 0.5);
            let x = Tensor::new(&[3], rand_vec(rng, 3, -0.5, 0.5))?;
            let w = rand_vec(rng, 48, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let iv = t.leaf(&[2, 4, 4], &xv)?;
                let kv = t.leaf(&[3, 2, 3, 3], &k)?;
                let y = t.conv2d(iv, kv, v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("maxpool2d", Box::new(|rng, eps| {
            let x = Tensor::new(&[1, 4, 4], rand_vec_separated(rng, 16))?;
            let w = rand_vec(rng, 4, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.maxpool2d(v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("global_avg_pool", Box::new(|rng, eps| {
            let x = Tensor::new(&[3, 4, 4], rand_vec(rng, 48, -1.0, 1.0))?;
            let w = rand_vec(rng, 3, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let y = t.global_avg_pool(v)?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
        ("sum_all", Box::new(|rng, eps| {
            let x = Tensor::new(&[9], rand_vec(rng, 9, -1.0, 1.0))?;
            finite_diff_check(&move |t: &mut Tape, v| Ok(t.sum_all(v)), &x, eps)
        })),
        ("neg_log_pick", Box::new(|rng, eps| {
            // strictly positive probabilities, away from the floor
            let logits = rand_vec(rng, 4, -0.75, 0.75);
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f32 = exps.iter().sum();
            let probs: Vec<f32> = exps.iter().map(|e| e / sum).collect();
            let x = Tensor::new(&[4], probs)?;
            let label = rng.index(4);
            let weight = rng.uniform(0.5, 2.0);
            finite_diff_check(
                &move |t: &mut Tape, v| t.neg_log_pick(v, label, weight),
                &x,
                eps,
            )
        })),
        ("softmax_cross_entropy", Box::new(|rng, eps| {
            let x = Tensor::new(&[5], rand_vec(rng, 5, -0.5, 0.5))?;
            let label = rng.index(5);
            let weight = rng.uniform(0.5, 2.0);
            finite_diff_check(
                &move |t: &mut Tape, v| {
                    let p = t.softmax_rows(v)?;
                    t.neg_log_pick(p, label, weight)
                },
                &x,
                eps,
            )
        })),
        ("add_n", Box::new(|rng, eps| {
            let x = Tensor::new(&[6], rand_vec(rng, 6, -1.0, 1.0))?;
            let b = rand_vec(rng, 6, -1.0, 1.0);
            let c = rand_vec(rng, 6, -1.0, 1.0);
            let w = rand_vec(rng, 6, 0.5, 1.5);
            finite_diff_check(&move |t: &mut Tape, v| {
                let bv = t.leaf(&[6], &b)?;
                let cv = t.leaf(&[6], &c)?;
                let y = t.add_n(&[v, bv, cv])?;
                weighted_sum(t, y, &w)
            }, &x, eps)
        })),
    ];

    for (name, runner) in &checks {
        let mut worst = 0.0f64;
        for case in 0..cases {
            let mut rng = Rng::seed_from(base_seed ^ (case as u64).wrapping_mul(0x9E37_79B9));
            let err = runner(&mut rng, epsilon)?;
            if err > worst {
                worst = err;
            }
        }
        reports.push(OpCheck { name, worst });
    }
    Ok(reports)
}
