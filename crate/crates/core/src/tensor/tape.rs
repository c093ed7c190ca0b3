//! Wengert tape: ops recorded during the forward pass are replayed in
//! reverse to accumulate gradients.
//!
//! ```
//! use memefuse_core::tensor::Tape;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(&[3], &[1.0, -2.0, 0.5]).unwrap();
//! let squared = tape.mul(w, w).unwrap();
//! let loss = tape.sum_all(squared);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0, 1.0]); // d/dw sum(w^2) = 2w
//! ```
//!
//! Values live in an arena indexed by [`Var`]; a recorded op names its input
//! and output vars plus whatever it must save for the backward rule. Nodes
//! are immutable once written, so a var can be used as an input any number
//! of times and gradients accumulate across all uses.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    values: Vec<f32>,
}

enum Op {
    MatMul { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    MatMulNT { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, out: Var },
    AddRowVec { a: Var, b: Var, out: Var, rows: usize, cols: usize },
    Scale { a: Var, out: Var, c: f32 },
    Mul { a: Var, b: Var, out: Var },
    Relu { a: Var, out: Var },
    Gelu { a: Var, out: Var },
    Tanh { a: Var, out: Var },
    SoftmaxRows { a: Var, out: Var, rows: usize, cols: usize },
    LayerNormRows {
        a: Var,
        gain: Var,
        bias: Var,
        out: Var,
        rows: usize,
        cols: usize,
        // per-row mean and reciprocal std saved during forward
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Dropout { a: Var, out: Var, mask: Vec<f32> },
    ConcatCols { parts: Vec<(Var, usize)>, out: Var, rows: usize },
    SliceCols { a: Var, out: Var, rows: usize, cols: usize, start: usize, len: usize },
    SliceRows { a: Var, out: Var, cols: usize, start: usize, len: usize },
    Reshape { a: Var, out: Var },
    Embedding { table: Var, out: Var, ids: Vec<u32>, dim: usize },
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Var,
        out: Var,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
    },
    MaxPool2d { x: Var, out: Var, c: usize, h: usize, w: usize, argmax: Vec<u32> },
    GlobalAvgPool { x: Var, out: Var, c: usize, h: usize, w: usize },
    SumAll { a: Var, out: Var },
    NegLogPick { p: Var, out: Var, index: usize, weight: f32 },
    AddN { parts: Vec<Var>, out: Var },
}

/// Probability floor inside `neg_log_pick`, keeping the loss finite for any
/// softmax output.
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044715;
const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f32>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape, values });
        self.grads.push(None);
        Var(id)
    }

    /// Record an input value with no producing op.
    pub fn leaf(&mut self, shape: &[usize], values: &[f32]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || numel == 0 {
            return Err(Error::Shape(format!(
                "leaf shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values.to_vec()))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec())
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    /// Gradient accumulated at `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn assert_finite(&self, v: Var, label: &str) -> Result<()> {
        if self.nodes[v.0].values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract(format!("non-finite value in {label}")));
        }
        Ok(())
    }

    // ---- rows/cols interpretation: a 1-d tensor is a single row ----

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => (shape[0], shape[1..].iter().product()),
        }
    }

    // ---- op builders ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].values, &self.nodes[b.0].values, &mut out, m, k, n);
        let shape = if self.nodes[a.0].shape.len() == 1 { vec![n] } else { vec![m, n] };
        let out_var = self.push(shape, out);
        self.ops.push(Op::MatMul { a, b, out: out_var, m, k, n });
        Ok(out_var)
    }

    /// a[m,k] times b[n,k] transposed -> [m,n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt inner dimensions differ: {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let out_var = self.push(vec![m, n], out);
        self.ops.push(Op::MatMulNT { a, b, out: out_var, m, k, n });
        Ok(out_var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Add { a, b, out: out_var });
        Ok(out_var)
    }

    /// Broadcast-add a length-`cols` vector to every row of `a`.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if self.numel(b) != cols {
            return Err(Error::Shape(format!(
                "add_row_vec: row width {cols} vs vector {:?}",
                self.shape(b)
            )));
        }
        let bv = self.nodes[b.0].values.clone();
        let mut out = self.nodes[a.0].values.clone();
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] += bv[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::AddRowVec { a, b, out: out_var, rows, cols });
        Ok(out_var)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out: Vec<f32> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Scale { a, out: out_var, c });
        out_var
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f32> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Mul { a, b, out: out_var });
        Ok(out_var)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Relu { a, out: out_var });
        out_var
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Gelu { a, out: out_var });
        out_var
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Tanh { a, out: out_var });
        out_var
    }

    /// Row-wise max-subtracted softmax. A 1-d input is a single row.
    /// Non-finite inputs propagate as NaN probabilities rather than
    /// erroring here, so the training loop can attribute them to a head.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::SoftmaxRows { a, out: out_var, rows, cols });
        Ok(out_var)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if self.numel(gain) != cols || self.numel(bias) != cols {
            return Err(Error::Shape(format!(
                "layer_norm: row width {cols} vs gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let av = &self.nodes[a.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0f32; rows * cols];
        let mut mean = vec![0.0f32; rows];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::LayerNormRows {
            a,
            gain,
            bias,
            out: out_var,
            rows,
            cols,
            mean,
            rstd,
        });
        Ok(out_var)
    }

    /// Inverted dropout: in train mode kept entries scale by 1/(1-rate); in
    /// eval mode (or rate 0) the input var is returned untouched, which makes
    /// eval an exact identity.
    pub fn dropout(&mut self, a: Var, rate: f32, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.numel(a))
            .map(|_| if rng.next_f32() < rate { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f32> = self.nodes[a.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let out_var = self.push(shape, out);
        self.ops.push(Op::Dropout { a, out: out_var, mask });
        Ok(out_var)
    }

    /// Concatenate along the feature (column) axis. All parts must have the
    /// same row count; 1-d parts count as single rows.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let (rows, _) = self.rows_cols(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat row mismatch: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        for r in 0..rows {
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].values[r * c..(r + 1) * c];
                out[r * total + offset..r * total + offset + c].copy_from_slice(src);
                offset += c;
            }
        }
        let shape = if self.nodes[parts[0].0].shape.len() == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let out_var = self.push(shape, out);
        self.ops.push(Op::ConcatCols {
            parts: parts.iter().copied().zip(widths).collect(),
            out: out_var,
            rows,
        });
        Ok(out_var)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of width {cols}",
                start + len
            )));
        }
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0f32; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let shape = if self.nodes[a.0].shape.len() == 1 { vec![len] } else { vec![rows, len] };
        let out_var = self.push(shape, out);
        self.ops.push(Op::SliceCols { a, out: out_var, rows, cols, start, len });
        Ok(out_var)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let av = &self.nodes[a.0].values;
        let out = av[start * cols..(start + len) * cols].to_vec();
        let out_var = self.push(vec![len, cols], out);
        self.ops.push(Op::SliceRows { a, out: out_var, cols, start, len });
        Ok(out_var)
    }

    /// Reinterpret the value buffer under a new shape; backward passes the
    /// gradient straight through.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(a)
            )));
        }
        let values = self.nodes[a.0].values.clone();
        let out_var = self.push(shape.to_vec(), values);
        self.ops.push(Op::Reshape { a, out: out_var });
        Ok(out_var)
    }

    /// Gather rows of an embedding table; backward scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-d, got {shape:?}")));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of vocabulary size {vocab}"
            )));
        }
        let tv = &self.nodes[table.0].values;
        let mut out = vec![0.0f32; ids.len() * dim];
        for (t, &id) in ids.iter().enumerate() {
            out[t * dim..(t + 1) * dim]
                .copy_from_slice(&tv[id as usize * dim..(id as usize + 1) * dim]);
        }
        let out_var = self.push(vec![ids.len(), dim], out);
        self.ops.push(Op::Embedding { table, out: out_var, ids: ids.to_vec(), dim });
        Ok(out_var)
    }

    /// 3x3 cross-correlation with padding 1; spatial size is preserved.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[kernels.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("conv2d input must be CxHxW, got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Shape(format!(
                "conv2d kernels must be Cout x Cin x 3 x 3, got {ks:?}"
            )));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ks[0];
        if ks[1] != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {xs:?} vs kernels {ks:?}"
            )));
        }
        if self.numel(bias) != cout {
            return Err(Error::Shape(format!(
                "conv2d bias length {} vs {cout} output channels",
                self.numel(bias)
            )));
        }
        let xv = &self.nodes[x.0].values;
        let kv = &self.nodes[kernels.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0f32; cout * h * w];
        conv2d_forward(xv, kv, bv, &mut out, cin, h, w, cout);
        let out_var = self.push(vec![cout, h, w], out);
        self.ops.push(Op::Conv2d { x, kernels, bias, out: out_var, cin, h, w, cout });
        Ok(out_var)
    }

    /// 2x2 max pooling, stride 2. Ties route the gradient to the first
    /// maximum in row-major window order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("maxpool2d input must be CxHxW, got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2d needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0f32; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ch * h * w + (oy * 2 + dy) * w + ox * 2 + dx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = best;
                    argmax[ch * oh * ow + oy * ow + ox] = best_idx;
                }
            }
        }
        let out_var = self.push(vec![c, oh, ow], out);
        self.ops.push(Op::MaxPool2d { x, out: out_var, c, h, w, argmax });
        Ok(out_var)
    }

    /// Per-channel spatial mean: CxHxW -> C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool input must be CxHxW, got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].values;
        let inv = 1.0 / (h * w) as f32;
        let out: Vec<f32> = (0..c)
            .map(|ch| xv[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>() * inv)
            .collect();
        let out_var = self.push(vec![c], out);
        self.ops.push(Op::GlobalAvgPool { x, out: out_var, c, h, w });
        Ok(out_var)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.nodes[a.0].values.iter().sum();
        let out_var = self.push(vec![1], vec![s]);
        self.ops.push(Op::SumAll { a, out: out_var });
        out_var
    }

    /// Scalar -weight * ln(max(p[index], 1e-12)), computed at 64-bit
    /// precision. The building block of weighted cross-entropy.
    pub fn neg_log_pick(&mut self, p: Var, index: usize, weight: f32) -> Result<Var> {
        let n = self.numel(p);
        if index >= n {
            return Err(Error::Input(format!("label {index} out of range for {n} classes")));
        }
        let picked = self.nodes[p.0].values[index] as f64;
        // f64::max would silently swallow NaN; keep it so the training loop
        // can detect and attribute a poisoned head
        let floored = if picked.is_nan() { picked } else { picked.max(LOG_FLOOR) };
        let loss = -(weight as f64) * floored.ln();
        let out_var = self.push(vec![1], vec![loss as f32]);
        self.ops.push(Op::NegLogPick { p, out: out_var, index, weight });
        Ok(out_var)
    }

    /// Elementwise sum of any number of same-shaped vars.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("add_n of zero tensors".into()));
        }
        let shape = self.nodes[parts[0].0].shape.clone();
        for &p in parts {
            if self.nodes[p.0].shape != shape {
                return Err(Error::Shape(format!(
                    "add_n shapes differ: {shape:?} vs {:?}",
                    self.shape(p)
                )));
            }
        }
        let mut out = vec![0.0f32; self.numel(parts[0])];
        for &p in parts {
            for (o, v) in out.iter_mut().zip(&self.nodes[p.0].values) {
                *o += v;
            }
        }
        let out_var = self.push(shape, out);
        self.ops.push(Op::AddN { parts: parts.to_vec(), out: out_var });
        Ok(out_var)
    }

    // ---- backward ----

    /// Replay recorded ops in reverse, accumulating gradients. `loss` must be
    /// a scalar on this tape; its gradient is seeded with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn backward_op(&mut self, op_index: usize) {
        // Split borrows: ops and nodes are read, grads is mutated.
        let (nodes, ops, grads) = (&self.nodes, &self.ops, &mut self.grads);
        let op = &ops[op_index];
        match op {
            Op::MatMul { a, b, out, m, k, n } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let (m, k, n) = (*m, *k, *n);
                let bv = &nodes[b.0].values;
                let mut d_a = vec![0.0f32; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d != 0.0 {
                            for p in 0..k {
                                d_a[i * k + p] += d * bv[j + p * n];
                            }
                        }
                    }
                }
                add_grad(grads, *a, &d_a);
                let av = &nodes[a.0].values;
                let mut d_b = vec![0.0f32; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x != 0.0 {
                            for j in 0..n {
                                d_b[p * n + j] += x * d_out[i * n + j];
                            }
                        }
                    }
                }
                add_grad(grads, *b, &d_b);
            }
            Op::MatMulNT { a, b, out, m, k, n } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let (m, k, n) = (*m, *k, *n);
                let bv = &nodes[b.0].values;
                // dA = dC . B   (m x n) . (n x k)
                let mut d_a = vec![0.0f32; m * k];
                matmul_acc(&d_out, bv, &mut d_a, m, n, k);
                add_grad(grads, *a, &d_a);
                // dB = dC^T . A (n x m) . (m x k)
                let av = &nodes[a.0].values;
                let mut d_b = vec![0.0f32; n * k];
                for j in 0..n {
                    for i in 0..m {
                        let d = d_out[i * n + j];
                        if d != 0.0 {
                            for p in 0..k {
                                d_b[j * k + p] += d * av[i * k + p];
                            }
                        }
                    }
                }
                add_grad(grads, *b, &d_b);
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                add_grad(grads, *a, &d_out);
                add_grad(grads, *b, &d_out);
            }
            Op::AddRowVec { a, b, out, rows, cols } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                add_grad(grads, *a, &d_out);
                let mut d_b = vec![0.0f32; *cols];
                for r in 0..*rows {
                    for j in 0..*cols {
                        d_b[j] += d_out[r * cols + j];
                    }
                }
                add_grad(grads, *b, &d_b);
            }
            Op::Scale { a, out, c } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a: Vec<f32> = d_out.iter().map(|d| d * c).collect();
                add_grad(grads, *a, &d_a);
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a: Vec<f32> =
                    d_out.iter().zip(&nodes[b.0].values).map(|(d, y)| d * y).collect();
                add_grad(grads, *a, &d_a);
                let d_b: Vec<f32> =
                    d_out.iter().zip(&nodes[a.0].values).map(|(d, x)| d * x).collect();
                add_grad(grads, *b, &d_b);
            }
            Op::Relu { a, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a: Vec<f32> = d_out
                    .iter()
                    .zip(&nodes[a.0].values)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                add_grad(grads, *a, &d_a);
            }
            Op::Gelu { a, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a: Vec<f32> = d_out
                    .iter()
                    .zip(&nodes[a.0].values)
                    .map(|(d, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                add_grad(grads, *a, &d_a);
            }
            Op::Tanh { a, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a: Vec<f32> = d_out
                    .iter()
                    .zip(&nodes[out.0].values)
                    .map(|(d, &y)| d * (1.0 - y * y))
                    .collect();
                add_grad(grads, *a, &d_a);
            }
            Op::SoftmaxRows { a, out, rows, cols } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let y = &nodes[out.0].values;
                let mut d_a = vec![0.0f32; rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let mut dot = 0.0f32;
                    for j in 0..*cols {
                        dot += d_out[base + j] * y[base + j];
                    }
                    for j in 0..*cols {
                        d_a[base + j] = y[base + j] * (d_out[base + j] - dot);
                    }
                }
                add_grad(grads, *a, &d_a);
            }
            Op::LayerNormRows { a, gain, bias, out, rows, cols, mean, rstd } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let xv = &nodes[a.0].values;
                let gv = &nodes[gain.0].values;
                let n = *cols as f32;
                let mut d_a = vec![0.0f32; rows * cols];
                let mut d_g = vec![0.0f32; *cols];
                let mut d_b = vec![0.0f32; *cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for j in 0..*cols {
                        let xhat = (xv[base + j] - mu) * rs;
                        let dy = d_out[base + j];
                        d_g[j] += dy * xhat;
                        d_b[j] += dy;
                        let dxhat = dy * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..*cols {
                        let xhat = (xv[base + j] - mu) * rs;
                        let dxhat = d_out[base + j] * gv[j];
                        d_a[base + j] =
                            rs * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                add_grad(grads, *a, &d_a);
                add_grad(grads, *gain, &d_g);
                add_grad(grads, *bias, &d_b);
            }
            Op::Dropout { a, out, mask } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a: Vec<f32> = d_out.iter().zip(mask).map(|(d, m)| d * m).collect();
                add_grad(grads, *a, &d_a);
            }
            Op::ConcatCols { parts, out, rows } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for (p, c) in parts {
                    let mut d_p = vec![0.0f32; rows * c];
                    for r in 0..*rows {
                        d_p[r * c..(r + 1) * c]
                            .copy_from_slice(&d_out[r * total + offset..r * total + offset + c]);
                    }
                    add_grad(grads, *p, &d_p);
                    offset += c;
                }
            }
            Op::SliceCols { a, out, rows, cols, start, len } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let mut d_a = vec![0.0f32; rows * cols];
                for r in 0..*rows {
                    for j in 0..*len {
                        d_a[r * cols + start + j] = d_out[r * len + j];
                    }
                }
                add_grad(grads, *a, &d_a);
            }
            Op::SliceRows { a, out, cols, start, len } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let mut d_a = vec![0.0f32; nodes[a.0].values.len()];
                d_a[start * cols..(start + len) * cols].copy_from_slice(&d_out);
                add_grad(grads, *a, &d_a);
            }
            Op::Reshape { a, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                add_grad(grads, *a, &d_out);
            }
            Op::Embedding { table, out, ids, dim } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let mut d_t = vec![0.0f32; nodes[table.0].values.len()];
                for (t, &id) in ids.iter().enumerate() {
                    let row = id as usize * dim;
                    for j in 0..*dim {
                        d_t[row + j] += d_out[t * dim + j];
                    }
                }
                add_grad(grads, *table, &d_t);
            }
            Op::Conv2d { x, kernels, bias, out, cin, h, w, cout } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let (cin, h, w, cout) = (*cin, *h, *w, *cout);
                let xv = &nodes[x.0].values;
                let kv = &nodes[kernels.0].values;
                let mut d_x = vec![0.0f32; cin * h * w];
                let mut d_k = vec![0.0f32; cout * cin * 9];
                let mut d_b = vec![0.0f32; cout];
                conv2d_backward(xv, kv, &d_out, &mut d_x, &mut d_k, &mut d_b, cin, h, w, cout);
                add_grad(grads, *x, &d_x);
                add_grad(grads, *kernels, &d_k);
                add_grad(grads, *bias, &d_b);
            }
            Op::MaxPool2d { x, out, c, h, w, argmax } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let _ = (c, h, w);
                let mut d_x = vec![0.0f32; nodes[x.0].values.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    d_x[src as usize] += d_out[o];
                }
                add_grad(grads, *x, &d_x);
            }
            Op::GlobalAvgPool { x, out, c, h, w } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let inv = 1.0 / (h * w) as f32;
                let mut d_x = vec![0.0f32; c * h * w];
                for ch in 0..*c {
                    let g = d_out[ch] * inv;
                    for i in 0..h * w {
                        d_x[ch * h * w + i] = g;
                    }
                }
                add_grad(grads, *x, &d_x);
            }
            Op::SumAll { a, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_a = vec![d_out[0]; nodes[a.0].values.len()];
                add_grad(grads, *a, &d_a);
            }
            Op::NegLogPick { p, out, index, weight } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let pv = nodes[p.0].values[*index] as f64;
                let mut d_p = vec![0.0f32; nodes[p.0].values.len()];
                if pv > LOG_FLOOR {
                    d_p[*index] = (-(*weight as f64) / pv) as f32 * d_out[0];
                }
                add_grad(grads, *p, &d_p);
            }
            Op::AddN { parts, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                for p in parts {
                    add_grad(grads, *p, &d_out);
                }
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Vec<f32>>], v: Var, contribution: &[f32]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => grads[v.0] = Some(contribution.to_vec()),
    }
}

/// out += a . b with a: [m,k], b: [k,n]. Inner loop runs over contiguous
/// rows of b so it vectorizes.
fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f32],
    k: &[f32],
    bias: &[f32],
    out: &mut [f32],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) {
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let kval = k[kbase + ky * 3 + kx];
                    if kval == 0.0 {
                        continue;
                    }
                    // output rows where the shifted input row exists
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = y * w;
                        let irow = iy * w;
                        for xo in x_lo..x_hi {
                            plane[orow + xo] += kval * xplane[irow + xo + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f32],
    k: &[f32],
    d_out: &[f32],
    d_x: &mut [f32],
    d_k: &mut [f32],
    d_b: &mut [f32],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) {
    for co in 0..cout {
        let dplane = &d_out[co * h * w..(co + 1) * h * w];
        d_b[co] += dplane.iter().sum::<f32>();
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            let dxplane = &mut d_x[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let kval = k[kbase + ky * 3 + kx];
                    let mut kgrad = 0.0f32;
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = (h + 1 - ky).min(h);
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (w + 1 - kx).min(w);
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = y * w;
                        let irow = iy * w;
                        for xo in x_lo..x_hi {
                            let d = dplane[orow + xo];
                            kgrad += d * xplane[irow + xo + kx - 1];
                            dxplane[irow + xo + kx - 1] += d * kval;
                        }
                    }
                    d_k[kbase + ky * 3 + kx] += kgrad;
                }
            }
        }
    }
}
