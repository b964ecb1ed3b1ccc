//! Tape-based reverse-mode differentiation over 2-D `[channels × time]` tensors.
//!
//! Every op appends a node; `backward` walks the tape in reverse insertion order
//! once and accumulates gradients into leaf tensors. A graph is built per
//! training step and dropped afterwards.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Linear,
    Nearest,
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(UpsampleMode::Linear),
            "nearest" => Ok(UpsampleMode::Nearest),
            other => Err(Error::InvalidArgument(format!("unknown upsample mode {other:?}"))),
        }
    }
}

/// Running statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { pad: usize, kernel: usize },
    MaxPool { argmax: Vec<usize> },
    Upsample { mode: UpsampleMode },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu,
    Softmax,
    Add,
    Sub,
    Mul,
    Scale(f64),
    LogClamped { floor: f64 },
    Abs,
    ClampMax(f64),
    Square,
    Sum,
    Mean,
    Concat,
    ConcatCols,
    SliceCols { start: usize },
    GatherCols { idx: Vec<usize> },
    Transpose,
    Pick { labels: Vec<usize> },
    MaxCols { argmax: Vec<usize> },
    NormalizeCols { norms: Vec<f64> },
    Matmul,
    Mix,
    ContrastNll { pairs: Vec<(usize, usize)>, negatives: Vec<Vec<usize>>, tau: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool { .. } => "maxpool1d",
            Op::Upsample { .. } => "upsample1d",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::LogClamped { .. } => "log",
            Op::Abs => "abs",
            Op::ClampMax(_) => "clamp_max",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherCols { .. } => "gather_cols",
            Op::Transpose => "transpose",
            Op::Pick { .. } => "pick",
            Op::MaxCols { .. } => "max_cols",
            Op::NormalizeCols { .. } => "normalize_cols",
            Op::Matmul => "matmul",
            Op::Mix => "mix",
            Op::ContrastNll { .. } => "contrast_nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
}

/// Parameter binding recorded when a stored parameter enters a graph.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Binding {
    pub store: u64,
    pub param: usize,
    pub var: Var,
}

#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [n] => (*n, 1),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.values.clear();
        self.nodes.clear();
        self.bindings.clear();
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.values.push(value);
        self.nodes.push(Node { op, inputs });
        Ok(Var(self.values.len() - 1))
    }

    /// Records a leaf; gradients are kept when the tensor requires them.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value.with_requires_grad(false))
    }

    pub(crate) fn bind(&mut self, store: u64, param: usize, value: Tensor) -> Result<Var> {
        let var = self.leaf(value)?;
        self.bindings.push(Binding { store, param, var });
        Ok(var)
    }

    pub(crate) fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.values {
            t.zero_grad();
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        dims2(&self.values[v.0])
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of `x: [cin × t]` with `weight: [cout × cin × k]` plus bias.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (cin, t) = self.rows_cols(x);
        let ws = self.shape(weight).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::Shape(format!(
                "conv1d weight {ws:?} does not match input channels {cin}"
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if self.values[bias.0].numel() != cout {
            return Err(Error::Shape(format!("conv1d bias must have {cout} entries")));
        }
        if t + 2 * pad < k {
            return Err(Error::Shape(format!("conv1d input of length {t} shorter than kernel {k}")));
        }
        let tout = t + 2 * pad + 1 - k;
        let cols = im2col(self.values[x.0].data(), cin, t, k, pad, tout);
        let mut out = vec![0.0; cout * tout];
        let b = self.values[bias.0].data();
        for (o, row) in out.chunks_mut(tout).enumerate() {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
        gemm(
            MatRef::new(self.values[weight.0].data(), cout, cin * k),
            MatRef::new(&cols, cin * k, tout),
            1.0,
            &mut out,
        );
        self.push(
            Op::Conv1d { pad, kernel: k },
            vec![x, weight, bias],
            Tensor::new(vec![cout, tout], out)?,
        )
    }

    /// Max-pool over non-overlapping windows `[i·w, min((i+1)·w, t))` for `i < out_len`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, out_len: usize) -> Result<Var> {
        let (c, t) = self.rows_cols(x);
        if window == 0 {
            return Err(Error::InvalidArgument("pooling window must be >= 1".into()));
        }
        if t == 0 {
            return Err(Error::Shape("cannot pool an empty sequence".into()));
        }
        if out_len == 0 || (out_len - 1) * window >= t {
            return Err(Error::Shape(format!(
                "{out_len} windows of size {window} do not fit length {t}"
            )));
        }
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; c * out_len];
        let mut argmax = vec![0; c * out_len];
        for ch in 0..c {
            let row = &xd[ch * t..(ch + 1) * t];
            for i in 0..out_len {
                let lo = i * window;
                let hi = ((i + 1) * window).min(t);
                let mut best = lo;
                for j in lo + 1..hi {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out[ch * out_len + i] = row[best];
                argmax[ch * out_len + i] = best;
            }
        }
        self.push(Op::MaxPool { argmax }, vec![x], Tensor::new(vec![c, out_len], out)?)
    }

    /// Ceil-mode max-pool: output length `⌈t / window⌉`, final window truncated.
    pub fn maxpool1d_ceil(&mut self, x: Var, window: usize) -> Result<Var> {
        let (_, t) = self.rows_cols(x);
        if window == 0 {
            return Err(Error::InvalidArgument("pooling window must be >= 1".into()));
        }
        if t == 0 {
            return Err(Error::Shape("cannot pool an empty sequence".into()));
        }
        self.maxpool1d(x, window, t.div_ceil(window))
    }

    /// Temporal resampling of `[c × t]` to `[c × target_len]`.
    pub fn upsample1d(&mut self, x: Var, target_len: usize, mode: UpsampleMode) -> Result<Var> {
        let (c, t) = self.rows_cols(x);
        if t == 0 || target_len == 0 {
            return Err(Error::Shape("upsample needs non-empty source and target".into()));
        }
        let taps = upsample_taps(t, target_len, mode);
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; c * target_len];
        for ch in 0..c {
            let row = &xd[ch * t..(ch + 1) * t];
            for (j, &(i0, i1, frac)) in taps.iter().enumerate() {
                out[ch * target_len + j] = row[i0] * (1.0 - frac) + row[i1] * frac;
            }
        }
        self.push(Op::Upsample { mode }, vec![x], Tensor::new(vec![c, target_len], out)?)
    }

    /// Per-channel normalization over time. Returns the output and, in training
    /// mode, the batch mean and unbiased variance for running-stat updates.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (c, t) = self.rows_cols(x);
        if t == 0 {
            return Err(Error::Shape("batchnorm on empty sequence".into()));
        }
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(Error::Shape(format!("batchnorm affine parameters must have {c} entries")));
        }
        let xd = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut xhat = vec![0.0; c * t];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * t];
        let mut stats = None;
        match running {
            None => {
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let row = &xd[ch * t..(ch + 1) * t];
                    let mean = row.iter().sum::<f64>() / t as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
                    let is = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[ch] = is;
                    for j in 0..t {
                        let h = (row[j] - mean) * is;
                        xhat[ch * t + j] = h;
                        out[ch * t + j] = g[ch] * h + b[ch];
                    }
                    means[ch] = mean;
                    vars[ch] = if t > 1 { var * t as f64 / (t - 1) as f64 } else { var };
                }
                stats = Some(BatchStats { mean: means, var: vars });
            }
            Some((rmean, rvar)) => {
                if rmean.len() != c || rvar.len() != c {
                    return Err(Error::Shape("running statistics have wrong length".into()));
                }
                for ch in 0..c {
                    let is = 1.0 / (rvar[ch] + BN_EPS).sqrt();
                    inv_std[ch] = is;
                    for j in 0..t {
                        let h = (xd[ch * t + j] - rmean[ch]) * is;
                        xhat[ch * t + j] = h;
                        out[ch * t + j] = g[ch] * h + b[ch];
                    }
                }
            }
        }
        let train = running.is_none();
        let v = self.push(
            Op::BatchNorm { xhat, inv_std, train },
            vec![x, gamma, beta],
            Tensor::new(vec![c, t], out)?,
        )?;
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = &self.values[x.0];
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let shape = src.shape().to_vec();
        self.push(Op::Relu, vec![x], Tensor::new(shape, data)?)
    }

    /// Softmax over axis 0 (classes) of `[c × t]`, independently per column.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (c, t) = self.rows_cols(x);
        if c == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; c * t];
        for j in 0..t {
            let mut m = f64::NEG_INFINITY;
            for i in 0..c {
                m = m.max(xd[i * t + j]);
            }
            let mut s = 0.0;
            for i in 0..c {
                let e = (xd[i * t + j] - m).exp();
                out[i * t + j] = e;
                s += e;
            }
            for i in 0..c {
                out[i * t + j] /= s;
            }
        }
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::Softmax, vec![x], Tensor::new(shape, out)?)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, vec![a, b], Tensor::new(shape, data)?)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = &self.values[x.0];
        let data = src.data().iter().map(|v| f(*v)).collect();
        let shape = src.shape().to_vec();
        self.push(op, vec![x], Tensor::new(shape, data)?)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Op::Scale(factor), |v| v * factor)
    }

    /// Natural log with inputs clamped below at `floor`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, Op::LogClamped { floor }, |v| v.max(floor).ln())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs, f64::abs)
    }

    pub fn clamp_max(&mut self, x: Var, max: f64) -> Result<Var> {
        self.unary(x, Op::ClampMax(max), |v| v.min(max))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.numel() == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(s))
    }

    /// Concatenation along axis 0 of `[c_i × t]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let t = self.rows_cols(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != t {
                return Err(Error::Shape(format!("concat: lengths {t} and {c} differ")));
            }
            rows += r;
            data.extend_from_slice(self.values[p.0].data());
        }
        self.push(Op::Concat, parts.to_vec(), Tensor::new(vec![rows, t], data)?)
    }

    /// Concatenation along axis 1 of `[r × t_i]` tensors.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let r = self.rows_cols(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p);
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: row counts {r} and {pr} differ")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.rows_cols(p).1;
                data.extend_from_slice(&self.values[p.0].data()[i * c..(i + 1) * c]);
            }
        }
        self.push(Op::ConcatCols, parts.to_vec(), Tensor::new(vec![r, total], data)?)
    }

    /// Columns `start..start+len` of `[r × c]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} out of {c}", start + len)));
        }
        let xd = self.values[x.0].data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { start }, vec![x], Tensor::new(vec![r, len], out)?)
    }

    /// Selects (possibly repeated) columns of `[r × c]`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Shape(format!("column {bad} out of {c}")));
        }
        let xd = self.values[x.0].data();
        let n = idx.len();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            for (j, &s) in idx.iter().enumerate() {
                out[i * n + j] = xd[i * c + s];
            }
        }
        self.push(
            Op::GatherCols { idx: idx.to_vec() },
            vec![x],
            Tensor::new(vec![r, n], out)?,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let t = self.values[x.0].clone().reshape(vec![r, c])?.transpose();
        self.push(Op::Transpose, vec![x], t)
    }

    /// `out[t] = x[labels[t], t]` for `x: [c × t]`.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (c, t) = self.rows_cols(x);
        if labels.len() != t {
            return Err(Error::Shape(format!("{} labels for {t} columns", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let xd = self.values[x.0].data();
        let out = labels.iter().enumerate().map(|(j, &l)| xd[l * t + j]).collect();
        self.push(
            Op::Pick { labels: labels.to_vec() },
            vec![x],
            Tensor::new(vec![t], out)?,
        )
    }

    /// Row-wise maximum over columns: `[r × c] -> [r × 1]`.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if c == 0 {
            return Err(Error::Shape("max over empty axis".into()));
        }
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; r];
        let mut argmax = vec![0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out[i] = row[best];
            argmax[i] = best;
        }
        self.push(Op::MaxCols { argmax }, vec![x], Tensor::new(vec![r, 1], out)?)
    }

    /// L2-normalizes every column of `[r × c]`; a zero column is an error.
    pub fn normalize_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let xd = self.values[x.0].data();
        let mut norms = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                norms[j] += xd[i * c + j] * xd[i * c + j];
            }
        }
        for (j, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if *n == 0.0 {
                return Err(Error::NonFinite(format!("normalize_cols: column {j} has zero norm")));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] / norms[j];
            }
        }
        self.push(Op::NormalizeCols { norms }, vec![x], Tensor::new(vec![r, c], out)?)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.values[a.0].data(), m, k),
            MatRef::new(self.values[b.0].data(), k, n),
            0.0,
            &mut out,
        );
        self.push(Op::Matmul, vec![a, b], Tensor::new(vec![m, n], out)?)
    }

    /// `Σ_u weights[u] · parts[u]` with a differentiable weight vector.
    pub fn mix(&mut self, parts: &[Var], weights: Var) -> Result<Var> {
        if parts.is_empty() || self.values[weights.0].numel() != parts.len() {
            return Err(Error::Shape(format!(
                "mix: {} parts for {} weights",
                parts.len(),
                self.values[weights.0].numel()
            )));
        }
        let shape = self.values[parts[0].0].shape().to_vec();
        let w = self.values[weights.0].data().to_vec();
        let mut out = vec![0.0; self.values[parts[0].0].numel()];
        for (u, &p) in parts.iter().enumerate() {
            let t = &self.values[p.0];
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape("mix parts differ in shape".into()));
            }
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += w[u] * v;
            }
        }
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        self.push(Op::Mix, inputs, Tensor::new(shape, out)?)
    }

    /// Mean negative log contrastive probability over `pairs`.
    ///
    /// `sim` is an `[n × n]` cosine-similarity matrix. For a pair `(i, j)` the
    /// probability is `e(i,j) / (e(i,j) + Σ_{k ∈ negatives[i]} e(i,k))` with
    /// `e(i,j) = exp(sim[i,j] / tau)`.
    pub fn contrast_nll(
        &mut self,
        sim: Var,
        pairs: &[(usize, usize)],
        negatives: &[Vec<usize>],
        tau: f64,
    ) -> Result<Var> {
        let (n, n2) = self.rows_cols(sim);
        if n != n2 || negatives.len() != n {
            return Err(Error::Shape("contrast_nll needs a square similarity matrix".into()));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("contrastive loss without positive pairs".into()));
        }
        if tau <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let s = self.values[sim.0].data();
        let mut total = 0.0;
        for &(i, j) in pairs {
            total += -log_prob(s, n, i, j, &negatives[i], tau);
        }
        let loss = total / pairs.len() as f64;
        self.push(
            Op::ContrastNll {
                pairs: pairs.to_vec(),
                negatives: negatives.to_vec(),
                tau,
            },
            vec![sim],
            Tensor::scalar(loss),
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`; gradients accumulate into leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    self.nodes[id].op.name()
                )));
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                if self.values[id].requires_grad() {
                    self.values[id].accumulate_grad(&gout);
                }
                continue;
            }
            let contributions = self.local_backward(id, &gout)?;
            for (input, g) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, gout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let out = &self.values[id];
        let val = |v: Var| &self.values[v.0];
        let res = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv1d { pad, kernel } => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (cin, t) = dims2(val(x));
                let cout = val(w).dim(0);
                let k = *kernel;
                let tout = out.dim(1);
                let cols = im2col(val(x).data(), cin, t, k, *pad, tout);
                let mut dw = vec![0.0; cout * cin * k];
                gemm(
                    MatRef::new(gout, cout, tout),
                    MatRef::new(&cols, cin * k, tout).t(),
                    0.0,
                    &mut dw,
                );
                let db: Vec<f64> = gout.chunks(tout).map(|r| r.iter().sum()).collect();
                let mut dcols = vec![0.0; cin * k * tout];
                gemm(
                    MatRef::new(val(w).data(), cout, cin * k).t(),
                    MatRef::new(gout, cout, tout),
                    0.0,
                    &mut dcols,
                );
                let dx = col2im(&dcols, cin, t, k, *pad, tout);
                vec![(x, dx), (w, dw), (b, db)]
            }
            Op::MaxPool { argmax } => {
                let x = ins[0];
                let (c, t) = dims2(val(x));
                let ol = out.dim(1);
                let mut dx = vec![0.0; c * t];
                for ch in 0..c {
                    for i in 0..ol {
                        dx[ch * t + argmax[ch * ol + i]] += gout[ch * ol + i];
                    }
                }
                vec![(x, dx)]
            }
            Op::Upsample { mode } => {
                let x = ins[0];
                let (c, t) = dims2(val(x));
                let tl = out.dim(1);
                let taps = upsample_taps(t, tl, *mode);
                let mut dx = vec![0.0; c * t];
                for ch in 0..c {
                    for (j, &(i0, i1, frac)) in taps.iter().enumerate() {
                        let g = gout[ch * tl + j];
                        dx[ch * t + i0] += g * (1.0 - frac);
                        dx[ch * t + i1] += g * frac;
                    }
                }
                vec![(x, dx)]
            }
            Op::BatchNorm { xhat, inv_std, train } => {
                let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
                let (c, t) = dims2(val(x));
                let g = val(gamma).data();
                let mut dx = vec![0.0; c * t];
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * t..(ch + 1) * t;
                    let go = &gout[r.clone()];
                    let xh = &xhat[r.clone()];
                    let sum_dy: f64 = go.iter().sum();
                    let sum_dy_xh: f64 = go.iter().zip(xh).map(|(a, b)| a * b).sum();
                    dg[ch] = sum_dy_xh;
                    dbeta[ch] = sum_dy;
                    let scale = g[ch] * inv_std[ch];
                    if *train {
                        let tf = t as f64;
                        for j in 0..t {
                            dx[ch * t + j] =
                                scale * (go[j] - sum_dy / tf - xh[j] * sum_dy_xh / tf);
                        }
                    } else {
                        for j in 0..t {
                            dx[ch * t + j] = scale * go[j];
                        }
                    }
                }
                vec![(x, dx), (gamma, dg), (beta, dbeta)]
            }
            Op::Relu => {
                let x = ins[0];
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(x, dx)]
            }
            Op::Softmax => {
                let (c, t) = dims2(out);
                let y = out.data();
                let mut dx = vec![0.0; c * t];
                for j in 0..t {
                    let dot: f64 = (0..c).map(|i| y[i * t + j] * gout[i * t + j]).sum();
                    for i in 0..c {
                        dx[i * t + j] = y[i * t + j] * (gout[i * t + j] - dot);
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Add => vec![(ins[0], gout.to_vec()), (ins[1], gout.to_vec())],
            Op::Sub => vec![(ins[0], gout.to_vec()), (ins[1], gout.iter().map(|g| -g).collect())],
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let da = gout.iter().zip(val(b).data()).map(|(g, v)| g * v).collect();
                let db = gout.iter().zip(val(a).data()).map(|(g, v)| g * v).collect();
                vec![(a, da), (b, db)]
            }
            Op::Scale(f) => vec![(ins[0], gout.iter().map(|g| g * f).collect())],
            Op::LogClamped { floor } => {
                let x = ins[0];
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > *floor { g / v } else { 0.0 })
                    .collect();
                vec![(x, dx)]
            }
            Op::Abs => {
                let x = ins[0];
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| g * v.signum() * if *v == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                vec![(x, dx)]
            }
            Op::ClampMax(m) => {
                let x = ins[0];
                let dx = val(x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v < *m { *g } else { 0.0 })
                    .collect();
                vec![(x, dx)]
            }
            Op::Square => {
                let x = ins[0];
                let dx = val(x).data().iter().zip(gout).map(|(v, g)| 2.0 * v * g).collect();
                vec![(x, dx)]
            }
            Op::Sum => {
                let x = ins[0];
                vec![(x, vec![gout[0]; val(x).numel()])]
            }
            Op::Mean => {
                let x = ins[0];
                let n = val(x).numel();
                vec![(x, vec![gout[0] / n as f64; n])]
            }
            Op::Concat => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(ins.len());
                for &p in ins {
                    let n = val(p).numel();
                    res.push((p, gout[offset..offset + n].to_vec()));
                    offset += n;
                }
                res
            }
            Op::ConcatCols => {
                let total = out.dim(1);
                let mut offset = 0;
                let mut res = Vec::with_capacity(ins.len());
                for &p in ins {
                    let (r, c) = (val(p).dim(0), val(p).dim(1));
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(&gout[i * total + offset..i * total + offset + c]);
                    }
                    res.push((p, d));
                    offset += c;
                }
                res
            }
            Op::SliceCols { start } => {
                let x = ins[0];
                let (r, c) = dims2(val(x));
                let len = out.dim(1);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                vec![(x, dx)]
            }
            Op::GatherCols { idx } => {
                let x = ins[0];
                let (r, c) = dims2(val(x));
                let n = idx.len();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for (j, &s) in idx.iter().enumerate() {
                        dx[i * c + s] += gout[i * n + j];
                    }
                }
                vec![(x, dx)]
            }
            Op::Transpose => {
                let (r, c) = dims2(out);
                let g = Tensor::new(vec![r, c], gout.to_vec())?.transpose();
                vec![(ins[0], g.into_data())]
            }
            Op::Pick { labels } => {
                let x = ins[0];
                let (c, t) = dims2(val(x));
                let mut dx = vec![0.0; c * t];
                for (j, &l) in labels.iter().enumerate() {
                    dx[l * t + j] = gout[j];
                }
                vec![(x, dx)]
            }
            Op::MaxCols { argmax } => {
                let x = ins[0];
                let (r, c) = dims2(val(x));
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + argmax[i]] = gout[i];
                }
                vec![(x, dx)]
            }
            Op::NormalizeCols { norms } => {
                let (r, c) = dims2(out);
                let y = out.data();
                let mut dots = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dots[j] += y[i * c + j] * gout[i * c + j];
                    }
                }
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = (gout[i * c + j] - y[i * c + j] * dots[j]) / norms[j];
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Matmul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = dims2(val(a));
                let n = val(b).dim(1);
                let mut da = vec![0.0; m * k];
                gemm(
                    MatRef::new(gout, m, n),
                    MatRef::new(val(b).data(), k, n).t(),
                    0.0,
                    &mut da,
                );
                let mut db = vec![0.0; k * n];
                gemm(
                    MatRef::new(val(a).data(), m, k).t(),
                    MatRef::new(gout, m, n),
                    0.0,
                    &mut db,
                );
                vec![(a, da), (b, db)]
            }
            Op::Mix => {
                let (parts, w) = ins.split_at(ins.len() - 1);
                let wd = val(w[0]).data();
                let mut res = Vec::with_capacity(ins.len());
                let mut dw = vec![0.0; parts.len()];
                for (u, &p) in parts.iter().enumerate() {
                    res.push((p, gout.iter().map(|g| g * wd[u]).collect()));
                    dw[u] = val(p).data().iter().zip(gout).map(|(a, b)| a * b).sum();
                }
                res.push((w[0], dw));
                res
            }
            Op::ContrastNll { pairs, negatives, tau } => {
                let sim = ins[0];
                let n = val(sim).dim(0);
                let s = val(sim).data();
                let mut ds = vec![0.0; n * n];
                let scale = gout[0] / pairs.len() as f64;
                for &(i, j) in pairs {
                    // -log p = -l_j + lse(l_j, l_k...), l = s / tau
                    let negs = &negatives[i];
                    let lj = s[i * n + j] / tau;
                    let mut m = lj;
                    for &k in negs {
                        m = m.max(s[i * n + k] / tau);
                    }
                    let mut den = (lj - m).exp();
                    for &k in negs {
                        den += (s[i * n + k] / tau - m).exp();
                    }
                    let pj = (lj - m).exp() / den;
                    ds[i * n + j] += scale * (pj - 1.0) / tau;
                    for &k in negs {
                        let q = (s[i * n + k] / tau - m).exp() / den;
                        ds[i * n + k] += scale * q / tau;
                    }
                }
                vec![(sim, ds)]
            }
        };
        Ok(res)
    }
}

fn log_prob(s: &[f64], n: usize, i: usize, j: usize, negs: &[usize], tau: f64) -> f64 {
    let lj = s[i * n + j] / tau;
    let mut m = lj;
    for &k in negs {
        m = m.max(s[i * n + k] / tau);
    }
    let mut den = (lj - m).exp();
    for &k in negs {
        den += (s[i * n + k] / tau - m).exp();
    }
    lj - m - den.ln()
}

/// Source taps `(i0, i1, frac)` for each target position.
pub(crate) fn upsample_taps(src: usize, dst: usize, mode: UpsampleMode) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|j| match mode {
            UpsampleMode::Nearest => {
                let i = (j * src / dst).min(src - 1);
                (i, i, 0.0)
            }
            UpsampleMode::Linear => {
                if dst == 1 || src == 1 {
                    (0, 0, 0.0)
                } else {
                    let pos = j as f64 * (src - 1) as f64 / (dst - 1) as f64;
                    let i0 = (pos.floor() as usize).min(src - 1);
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, pos - i0 as f64)
                }
            }
        })
        .collect()
}

fn im2col(x: &[f64], cin: usize, t: usize, k: usize, pad: usize, tout: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * tout];
    for c in 0..cin {
        let row = &x[c * t..(c + 1) * t];
        for j in 0..k {
            let dst = &mut cols[(c * k + j) * tout..(c * k + j + 1) * tout];
            // source index s = o + j - pad must lie in [0, t)
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(tout);
            if lo < hi {
                let src_lo = lo + j - pad;
                dst[lo..hi].copy_from_slice(&row[src_lo..src_lo + (hi - lo)]);
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, t: usize, k: usize, pad: usize, tout: usize) -> Vec<f64> {
    let mut dx = vec![0.0; cin * t];
    for c in 0..cin {
        for j in 0..k {
            let src = &cols[(c * k + j) * tout..(c * k + j + 1) * tout];
            let lo = pad.saturating_sub(j);
            let hi = (t + pad).saturating_sub(j).min(tout);
            for o in lo..hi {
                dx[c * t + o + j - pad] += src[o];
            }
        }
    }
    dx
}
