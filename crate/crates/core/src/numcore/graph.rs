//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node. Parameters are read
//! from a borrowed [`ParamStore`], so independent graphs over the same store
//! can be evaluated concurrently. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every tracked node.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{MuseError, Result};
use crate::numcore::params::{Gradients, ParamId, ParamStore};
use crate::numcore::tensor::{gemm, Layout, Tensor};

/// Probability clamp used by [`Graph::bce_sum`] and the metrics.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

enum Op {
    Constant,
    Param,
    Input,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    EmbeddingBagMean {
        table: Var,
        bags: Vec<Vec<usize>>,
    },
    ContinuousEmbed {
        w: Var,
        xs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    CausalAggregate {
        x: Var,
        logits: Var,
        taps: usize,
        weights: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    BceSum {
        p: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    PoolScores(Box<PoolCache>),
}

struct PoolCache {
    s: Var,
    q: Var,
    a: Var,
    b: Var,
    c: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    allowed: Vec<bool>,
    /// Per query row j: number of key rows evaluated (last allowed + 1).
    extent: Vec<usize>,
    /// Activation outputs and derivatives, row j stored as `extent[j] x h`.
    act_out: Vec<Vec<f64>>,
    act_grad: Vec<Vec<f64>>,
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    tracked: bool,
}

/// One recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, Var>,
    training: bool,
}

fn act_fwd(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::Gelu => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + tanh(k * (x + 0.044715 * x * x * x)))
        }
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => sigmoid(x),
        Activation::Tanh => tanh(x),
    }
}

/// Output and derivative at `x`.
fn act_both(a: Activation, x: f64) -> (f64, f64) {
    match a {
        Activation::Gelu => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            let t = tanh(k * (x + 0.044715 * x * x * x));
            let y = 0.5 * x * (1.0 + t);
            (y, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x))
        }
        _ => {
            let y = act_fwd(a, x);
            (y, act_bwd(a, x, y))
        }
    }
}

/// Derivative given the input `x` and output `y`.
fn act_bwd(a: Activation, x: f64, y: f64) -> f64 {
    match a {
        Activation::Identity => 1.0,
        Activation::Gelu => {
            let k = (2.0 / std::f64::consts::PI).sqrt();
            let t = tanh(k * (x + 0.044715 * x * x * x));
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x)
        }
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Tanh => 1.0 - y * y,
    }
}

/// `tanh` through a single `exp`. Absolute error stays near machine epsilon
/// and it is much cheaper than `f64::tanh`.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(MuseError::shape(op, detail()))
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
            training: false,
        }
    }

    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// An external input whose gradient is reported by [`Backward::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        // Parameter values are borrowed from the store, not copied.
        self.nodes.push(Node { value: Cow::Borrowed(self.params.value(id)), op: Op::Param, tracked: true });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Parameter leaf looked up by name.
    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| MuseError::InvalidArgument(format!("no parameter named {name}")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        check(k == k2, "matmul", || format!("{:?} x {:?}", ta.shape(), tb.shape()))?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Layout::N, tb.data(), Layout::N, &mut out, 0.0);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), tr))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        check(k == k2, "matmul_nt", || format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()))?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Layout::N, tb.data(), Layout::T, &mut out, 0.0);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), tr))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.len() == tb.len() && ta.cols() == tb.cols(), op, || {
            format!("{:?} vs {:?}", ta.shape(), tb.shape())
        })
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        check(tb.len() == n, "add_row", || format!("{:?} + {:?}", tx.shape(), tb.shape()))?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(tb.data()) {
                *v += bb;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let tr = self.tracked(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), tr))
    }

    /// Multiplies every row of `x` elementwise by the vector `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let n = tx.cols();
        check(tv.len() == n, "mul_row", || format!("{:?} * {:?}", tx.shape(), tv.shape()))?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (a, b) in row.iter_mut().zip(tv.data()) {
                *a *= b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let tr = self.tracked(&[x, v]);
        Ok(self.push(t, Op::MulRow(x, v), tr))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let tr = self.tracked(&[x]);
        self.push(t, Op::Affine(x, scale), tr)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn activation(&mut self, x: Var, a: Activation) -> Var {
        if a == Activation::Identity {
            return x;
        }
        let t = self.value(x).map(|v| act_fwd(a, v));
        let tr = self.tracked(&[x]);
        self.push(t, Op::Act(x, a), tr)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Row-wise softmax with an additive `{0, -inf}` mask given as a boolean
    /// "allowed" pattern of the same shape. Disallowed entries come out
    /// exactly zero. Every row needs at least one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if let Some(m) = allowed {
            check(m.len() == tx.len(), "masked_softmax", || {
                format!("mask of {} for {:?}", m.len(), tx.shape())
            })?;
        }
        let mut out = vec![0.0; tx.len()];
        for (r, (row, o)) in tx.data().chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let ok = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            check(max > f64::NEG_INFINITY, "masked_softmax", || {
                format!("row {r} has no allowed entries")
            })?;
            let mut sum = 0.0;
            for j in 0..n {
                if ok(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let tr = self.tracked(&[x]);
        Ok(self.push(t, Op::MaskedSoftmax(x), tr))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        check(tg.len() == n && tb.len() == n, "layer_norm", || {
            format!("{:?} with gain {:?}", tx.shape(), tg.shape())
        })?;
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let tr = self.tracked(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, tr))
    }

    /// Rows of `table` selected by `ids`, shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(MuseError::IndexOutOfRange { index: id, size: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        check(!ids.is_empty(), "embedding", || "empty id list".into())?;
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        let tr = self.tracked(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, tr))
    }

    /// Mean of the looked-up rows per bag; an empty bag yields zeros.
    pub fn embedding_bag_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        check(!bags.is_empty(), "embedding_bag_mean", || "no bags".into())?;
        let mut out = vec![0.0; bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let inv = 1.0 / bag.len() as f64;
            for &id in bag {
                if id >= v {
                    return Err(MuseError::IndexOutOfRange { index: id, size: v });
                }
                for (o, x) in out[b * d..(b + 1) * d].iter_mut().zip(tt.row(id)) {
                    *o += inv * x;
                }
            }
        }
        let t = Tensor::from_parts(vec![bags.len(), d], out);
        let tr = self.tracked(&[table]);
        Ok(self.push(t, Op::EmbeddingBagMean { table, bags: bags.to_vec() }, tr))
    }

    /// `xs[i] * w` for each scalar feature value, shape `[xs.len(), d]`.
    pub fn continuous_embed(&mut self, w: Var, xs: &[f64]) -> Result<Var> {
        let tw = self.value(w);
        let d = tw.len();
        check(!xs.is_empty(), "continuous_embed", || "no values".into())?;
        let mut out = Vec::with_capacity(xs.len() * d);
        for &x in xs {
            out.extend(tw.data().iter().map(|v| x * v));
        }
        let t = Tensor::from_parts(vec![xs.len(), d], out);
        let tr = self.tracked(&[w]);
        Ok(self.push(t, Op::ContinuousEmbed { w, xs: xs.to_vec() }, tr))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_cols", || "nothing to concatenate".into())?;
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            let r = self.value(p).rows();
            check(r == rows, "concat_cols", || format!("row counts {rows} vs {r}"))?;
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        let tr = self.tracked(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), tr))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), "concat_rows", || "nothing to concatenate".into())?;
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            check(t.cols() == cols, "concat_rows", || format!("col counts {cols} vs {}", t.cols()))?;
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let t = Tensor::from_parts(vec![rows, cols], out);
        let tr = self.tracked(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), tr))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        check(start < end && end <= c, "slice_cols", || format!("{start}..{end} of {c}"))?;
        let w = end - start;
        let mut out = Vec::with_capacity(tx.rows() * w);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..end]);
        }
        let t = Tensor::from_parts(vec![tx.rows(), w], out);
        let tr = self.tracked(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), tr))
    }

    /// Rows of `x` picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.rows();
        check(!rows.is_empty(), "gather_rows", || "no rows".into())?;
        let mut out = Vec::with_capacity(rows.len() * tx.cols());
        for &r in rows {
            if r >= n {
                return Err(MuseError::IndexOutOfRange { index: r, size: n });
            }
            out.extend_from_slice(tx.row(r));
        }
        let t = Tensor::from_parts(vec![rows.len(), tx.cols()], out);
        let tr = self.tracked(&[x]);
        Ok(self.push(t, Op::GatherRows(x, rows.to_vec()), tr))
    }

    /// Causal learned-window smoothing: row `i` of the output is a softmax-
    /// weighted sum of rows `i-taps+1 ..= i`, with `logits[taps-1]` weighting
    /// row `i` itself. Taps before row 0 or on rows with `valid == false`
    /// (other than row `i` itself) are dropped and the remaining weights
    /// renormalized.
    pub fn causal_aggregate(&mut self, x: Var, logits: Var, valid: &[bool]) -> Result<Var> {
        let (tx, tl) = (self.value(x), self.value(logits));
        let (l, d) = (tx.rows(), tx.cols());
        let taps = tl.len();
        check(valid.len() == l, "causal_aggregate", || {
            format!("{} validity flags for {l} rows", valid.len())
        })?;
        let mut weights = vec![0.0; l * taps];
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            let w = &mut weights[i * taps..(i + 1) * taps];
            let mut max = f64::NEG_INFINITY;
            for t in 0..taps {
                if let Some(j) = (i + t + 1).checked_sub(taps) {
                    if j == i || valid[j] {
                        max = max.max(tl.data()[t]);
                    }
                }
            }
            let mut sum = 0.0;
            for t in 0..taps {
                if let Some(j) = (i + t + 1).checked_sub(taps) {
                    if j == i || valid[j] {
                        w[t] = (tl.data()[t] - max).exp();
                        sum += w[t];
                    }
                }
            }
            for t in 0..taps {
                w[t] /= sum;
                if w[t] != 0.0 {
                    let j = i + t + 1 - taps;
                    let o = &mut out[i * d..(i + 1) * d];
                    for (ov, xv) in o.iter_mut().zip(tx.row(j)) {
                        *ov += w[t] * xv;
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![l, d], out);
        let tr = self.tracked(&[x, logits]);
        Ok(self.push(t, Op::CausalAggregate { x, logits, taps, weights }, tr))
    }

    /// Inverted dropout; identity when `p == 0` or outside training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let tr = self.tracked(&[x]);
        self.push(t, Op::Dropout(x, mask), tr)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tr = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    /// `Σ weights[i] · bce(p[i], targets[i])` with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_sum(&mut self, p: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        check(tp.len() == targets.len() && targets.len() == weights.len(), "bce_sum", || {
            format!("{} probs, {} targets, {} weights", tp.len(), targets.len(), weights.len())
        })?;
        let total = tp
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&pv, &y), &w)| w * bce(pv, y))
            .sum();
        let tr = self.tracked(&[p]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceSum { p, targets: targets.to_vec(), weights: weights.to_vec() },
            tr,
        ))
    }

    /// Scores of a two-layer pair MLP used for attention pooling.
    ///
    /// For query row `j` of `q` and key row `i` of `s` where
    /// `allowed[j * L + i]`, the score is
    /// `w2 · act(s_i A + q_j B + (s_i ⊙ q_j) C + b1) + b2`; this is the
    /// MLP over `[s_i ; q_j ; s_i ⊙ q_j]` with its first weight matrix split
    /// into the three blocks `A`, `B`, `C`. Disallowed pairs score 0.
    /// Output shape `[M, L]`.
    #[allow(clippy::too_many_arguments)]
    pub fn pool_scores(
        &mut self,
        s: Var,
        q: Var,
        a: Var,
        b: Var,
        c: Var,
        b1: Var,
        w2: Var,
        b2: Var,
        act: Activation,
        allowed: &[bool],
    ) -> Result<Var> {
        let (ts, tq) = (self.value(s), self.value(q));
        let (l, d, m) = (ts.rows(), ts.cols(), tq.rows());
        let h = self.value(a).cols();
        check(tq.cols() == d, "pool_scores", || format!("keys {:?} queries {:?}", ts.shape(), tq.shape()))?;
        for (name, v) in [("A", a), ("B", b), ("C", c)] {
            let t = self.value(v);
            check(t.rows() == d && t.cols() == h, "pool_scores", || {
                format!("{name} is {:?}, expected [{d},{h}]", t.shape())
            })?;
        }
        check(
            self.value(b1).len() == h && self.value(w2).len() == h && self.value(b2).len() == 1,
            "pool_scores",
            || "bias / output weight sizes".into(),
        )?;
        check(allowed.len() == m * l, "pool_scores", || {
            format!("mask of {} for {m}x{l}", allowed.len())
        })?;

        let mut sa = vec![0.0; l * h];
        gemm(l, d, h, ts.data(), Layout::N, self.value(a).data(), Layout::N, &mut sa, 0.0);
        let mut qb = vec![0.0; m * h];
        gemm(m, d, h, tq.data(), Layout::N, self.value(b).data(), Layout::N, &mut qb, 0.0);
        let tc = self.value(c).data();
        let (tb1, tw2, tb2) = (self.value(b1).data(), self.value(w2).data(), self.value(b2).item());

        let mut extent = vec![0usize; m];
        let mut act_out = Vec::with_capacity(m);
        let mut act_grad = Vec::with_capacity(m);
        let mut out = vec![0.0; m * l];
        let mut cq = vec![0.0; d * h];
        for j in 0..m {
            let mask = &allowed[j * l..(j + 1) * l];
            let e = mask.iter().rposition(|&x| x).map_or(0, |p| p + 1);
            extent[j] = e;
            if e == 0 {
                act_out.push(Vec::new());
                act_grad.push(Vec::new());
                continue;
            }
            let qj = tq.row(j);
            for k in 0..d {
                for u in 0..h {
                    cq[k * h + u] = qj[k] * tc[k * h + u];
                }
            }
            let mut p = sa[..e * h].to_vec();
            gemm(e, d, h, ts.data(), Layout::N, &cq, Layout::N, &mut p, 1.0);
            let mut dy = vec![0.0; e * h];
            for i in 0..e {
                if !mask[i] {
                    continue;
                }
                let row = &mut p[i * h..(i + 1) * h];
                let drow = &mut dy[i * h..(i + 1) * h];
                let mut score = tb2;
                for u in 0..h {
                    let (y, g) = act_both(act, row[u] + qb[j * h + u] + tb1[u]);
                    row[u] = y;
                    drow[u] = g;
                    score += y * tw2[u];
                }
                out[j * l + i] = score;
            }
            act_out.push(p);
            act_grad.push(dy);
        }
        let t = Tensor::from_parts(vec![m, l], out);
        let tr = self.tracked(&[s, q, a, b, c, b1, w2, b2]);
        let cache = PoolCache {
            s,
            q,
            a,
            b,
            c,
            b1,
            w2,
            b2,
            allowed: allowed.to_vec(),
            extent,
            act_out,
            act_grad,
        };
        Ok(self.push(t, Op::PoolScores(Box::new(cache)), tr))
    }

    /// Reverse pass seeded with `1` at the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let t = self.value(loss);
        check(t.len() == 1, "backward", || format!("loss has shape {:?}", t.shape()))?;
        self.backward_with(&[(loss, Tensor::scalar(1.0))])
    }

    pub fn backward_with(&self, seeds: &[(Var, Tensor)]) -> Result<Backward> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            check(g.len() == self.value(*v).len(), "backward", || "seed shape".into())?;
            acc(&mut grads, *v, g.clone());
        }
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut param_grads = Gradients::empty(self.params.len());
        for (&pid, &v) in &self.param_nodes {
            param_grads.grads[pid.0] = grads[v.0].clone();
        }
        Ok(Backward { grads, param_grads })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param | Op::Input => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, Layout::N, tb.data(), Layout::T, &mut da, 0.0);
                    acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), Layout::T, gd, Layout::N, &mut db, 0.0);
                    acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, Layout::N, tb.data(), Layout::N, &mut da, 0.0);
                    acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, Layout::T, ta.data(), Layout::N, &mut db, 0.0);
                    acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    acc(grads, *a, reshaped(g, self.value(*a)));
                }
                if tracked(*b) {
                    acc(grads, *b, reshaped(g, self.value(*b)));
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    acc(grads, *a, reshaped(g, self.value(*a)));
                }
                if tracked(*b) {
                    acc(grads, *b, reshaped(&g.map(|v| -v), self.value(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if tracked(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if tracked(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::AddRow(x, b) => {
                if tracked(*x) {
                    acc(grads, *x, reshaped(g, self.value(*x)));
                }
                if tracked(*b) {
                    let tb = self.value(*b);
                    let n = tb.len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            Op::MulRow(x, v) => {
                let (tx, tv) = (self.value(*x), self.value(*v));
                let n = tv.len();
                if tracked(*x) {
                    let mut dx = gd.to_vec();
                    for row in dx.chunks_exact_mut(n) {
                        for (a, b) in row.iter_mut().zip(tv.data()) {
                            *a *= b;
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if tracked(*v) {
                    let mut dv = vec![0.0; n];
                    for (grow, xrow) in gd.chunks_exact(n).zip(tx.data().chunks_exact(n)) {
                        for j in 0..n {
                            dv[j] += grow[j] * xrow[j];
                        }
                    }
                    acc(grads, *v, Tensor::from_parts(tv.shape().to_vec(), dv));
                }
            }
            Op::Affine(x, s) => {
                acc(grads, *x, reshaped(&g.map(|v| v * s), self.value(*x)));
            }
            Op::Act(x, a) => {
                let tx = self.value(*x);
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .zip(y)
                    .map(|((gv, &xv), &yv)| gv * act_bwd(*a, xv, yv))
                    .collect();
                acc(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let n = tg.len();
                let rows = rstd.len();
                if tracked(*gain) || tracked(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                            db[j] += gd[r * n + j];
                        }
                    }
                    if tracked(*gain) {
                        acc(grads, *gain, Tensor::from_parts(tg.shape().to_vec(), dg));
                    }
                    if tracked(*bias) {
                        let tb = self.value(*bias);
                        acc(grads, *bias, Tensor::from_parts(tb.shape().to_vec(), db));
                    }
                }
                if tracked(*x) {
                    let mut dx = vec![0.0; rows * n];
                    let mut dxh = vec![0.0; n];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxh[j] = gd[r * n + j] * tg.data()[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[r * n + j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dxh[j] - m1 - xhat[r * n + j] * m2);
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = self.take_or_zero(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                grads[table.0] = Some(dt);
            }
            Op::EmbeddingBagMean { table, bags } => {
                let d = self.value(*table).cols();
                let mut dt = self.take_or_zero(grads, *table);
                for (r, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / bag.len() as f64;
                    for &id in bag {
                        for (a, b) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *a += inv * b;
                        }
                    }
                }
                grads[table.0] = Some(dt);
            }
            Op::ContinuousEmbed { w, xs } => {
                let tw = self.value(*w);
                let d = tw.len();
                let mut dw = vec![0.0; d];
                for (r, &x) in xs.iter().enumerate() {
                    for j in 0..d {
                        dw[j] += x * gd[r * d + j];
                    }
                }
                acc(grads, *w, Tensor::from_parts(tw.shape().to_vec(), dw));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.cols();
                    if tracked(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                        }
                        acc(grads, p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if tracked(p) {
                        let d = gd[off..off + tp.len()].to_vec();
                        acc(grads, p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    off += tp.len();
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, w) = (tx.cols(), g.cols());
                let mut dx = self.take_or_zero(grads, *x);
                for r in 0..tx.rows() {
                    for j in 0..w {
                        dx.data_mut()[r * c + start + j] += gd[r * w + j];
                    }
                }
                grads[x.0] = Some(dx);
            }
            Op::GatherRows(x, rows) => {
                let c = self.value(*x).cols();
                let mut dx = self.take_or_zero(grads, *x);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx.data_mut()[r * c + j] += gd[k * c + j];
                    }
                }
                grads[x.0] = Some(dx);
            }
            Op::CausalAggregate { x, logits, taps, weights } => {
                let tx = self.value(*x);
                let (l, d) = (tx.rows(), tx.cols());
                let taps = *taps;
                if tracked(*x) {
                    let mut dx = vec![0.0; l * d];
                    for i in 0..l {
                        for t in 0..taps {
                            let w = weights[i * taps + t];
                            if w != 0.0 {
                                let j = i + t + 1 - taps;
                                for k in 0..d {
                                    dx[j * d + k] += w * gd[i * d + k];
                                }
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx));
                }
                if tracked(*logits) {
                    let mut dl = vec![0.0; taps];
                    let mut dw = vec![0.0; taps];
                    for i in 0..l {
                        let w = &weights[i * taps..(i + 1) * taps];
                        let mut dot = 0.0;
                        for t in 0..taps {
                            dw[t] = 0.0;
                            if w[t] != 0.0 {
                                let j = i + t + 1 - taps;
                                dw[t] = tx.row(j).iter().zip(&gd[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum();
                                dot += w[t] * dw[t];
                            }
                        }
                        for t in 0..taps {
                            dl[t] += w[t] * (dw[t] - dot);
                        }
                    }
                    acc(grads, *logits, Tensor::from_parts(self.value(*logits).shape().to_vec(), dl));
                }
            }
            Op::Dropout(x, mask) => {
                let d = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                acc(grads, *x, Tensor::full(tx.shape(), g.item()));
            }
            Op::BceSum { p, targets, weights } => {
                let tp = self.value(*p);
                let s = g.item();
                let d = tp
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&pv, &y), &w)| {
                        if w == 0.0 || !(PROB_EPS..=1.0 - PROB_EPS).contains(&pv) {
                            0.0
                        } else {
                            s * w * (-y / pv + (1.0 - y) / (1.0 - pv))
                        }
                    })
                    .collect();
                acc(grads, *p, Tensor::from_parts(tp.shape().to_vec(), d));
            }
            Op::PoolScores(cache) => self.backprop_pool(cache, gd, grads),
        }
    }

    fn backprop_pool(&self, pc: &PoolCache, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let (ts, tq) = (self.value(pc.s), self.value(pc.q));
        let (l, d, m) = (ts.rows(), ts.cols(), tq.rows());
        let ta = self.value(pc.a);
        let tb = self.value(pc.b);
        let tc = self.value(pc.c);
        let h = ta.cols();
        let tw2 = self.value(pc.w2).data();

        let mut ds = vec![0.0; l * d];
        let mut dq = vec![0.0; m * d];
        let mut dc = vec![0.0; d * h];
        let mut db = vec![0.0; d * h];
        let mut db1 = vec![0.0; h];
        let mut dw2 = vec![0.0; h];
        let mut db2 = 0.0;
        // Σ_j dpre_ij, aligned with key rows.
        let mut gs = vec![0.0; l * h];
        let mut dp = Vec::new();
        let mut t_j = vec![0.0; d * h];
        let mut u_j = Vec::new();
        for j in 0..m {
            let e = pc.extent[j];
            if e == 0 {
                continue;
            }
            let (ys, gs_act) = (&pc.act_out[j], &pc.act_grad[j]);
            dp.clear();
            dp.resize(e * h, 0.0);
            let mut rowsum = vec![0.0; h];
            let mut any = false;
            for i in 0..e {
                if !pc.allowed[j * l + i] {
                    continue;
                }
                let dz = gd[j * l + i];
                if dz == 0.0 {
                    continue;
                }
                any = true;
                db2 += dz;
                for u in 0..h {
                    dw2[u] += dz * ys[i * h + u];
                    let v = dz * tw2[u] * gs_act[i * h + u];
                    dp[i * h + u] = v;
                    rowsum[u] += v;
                    gs[i * h + u] += v;
                }
            }
            if !any {
                continue;
            }
            for u in 0..h {
                db1[u] += rowsum[u];
            }
            let qj = tq.row(j);
            for k in 0..d {
                for u in 0..h {
                    db[k * h + u] += qj[k] * rowsum[u];
                }
                let bq: f64 = (0..h).map(|u| rowsum[u] * tb.data()[k * h + u]).sum();
                dq[j * d + k] += bq;
            }
            // dC += diag(q_j) · S[..e]ᵀ dP_j
            gemm(d, e, h, ts.data(), Layout::T, &dp, Layout::N, &mut t_j, 0.0);
            for k in 0..d {
                for u in 0..h {
                    dc[k * h + u] += qj[k] * t_j[k * h + u];
                }
            }
            // U_j = dP_j Cᵀ
            u_j.clear();
            u_j.resize(e * d, 0.0);
            gemm(e, h, d, &dp, Layout::N, tc.data(), Layout::T, &mut u_j, 0.0);
            for i in 0..e {
                let si = ts.row(i);
                for k in 0..d {
                    let u = u_j[i * d + k];
                    ds[i * d + k] += u * qj[k];
                    dq[j * d + k] += u * si[k];
                }
            }
        }
        // dA = Sᵀ G_S ; dS += G_S Aᵀ
        if tracked(pc.a) {
            let mut da = vec![0.0; d * h];
            gemm(d, l, h, ts.data(), Layout::T, &gs, Layout::N, &mut da, 0.0);
            acc(grads, pc.a, Tensor::from_parts(ta.shape().to_vec(), da));
        }
        gemm(l, h, d, &gs, Layout::N, ta.data(), Layout::T, &mut ds, 1.0);
        let parts = [
            (pc.s, ds, ts.shape().to_vec()),
            (pc.q, dq, tq.shape().to_vec()),
            (pc.b, db, tb.shape().to_vec()),
            (pc.c, dc, tc.shape().to_vec()),
            (pc.b1, db1, self.value(pc.b1).shape().to_vec()),
            (pc.w2, dw2, self.value(pc.w2).shape().to_vec()),
            (pc.b2, vec![db2], self.value(pc.b2).shape().to_vec()),
        ];
        for (v, data, shape) in parts {
            if tracked(v) {
                acc(grads, v, Tensor::from_parts(shape, data));
            }
        }
    }

    fn take_or_zero(&self, grads: &mut [Option<Tensor>], v: Var) -> Tensor {
        grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }
}

fn reshaped(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), g.data().to_vec())
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse pass.
pub struct Backward {
    grads: Vec<Option<Tensor>>,
    param_grads: Gradients,
}

impl Backward {
    /// Gradient with respect to any tracked node (inputs, parameters,
    /// intermediates).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &Gradients {
        &self.param_grads
    }

    pub fn into_params(self) -> Gradients {
        self.param_grads
    }
}
