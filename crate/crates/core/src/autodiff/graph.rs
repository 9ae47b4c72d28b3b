use rand::Rng;

use super::kernels::{dot, mm_nn_acc, mm_nt_acc, mm_tn_acc, transpose};
use crate::tensor::Tensor;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
}

fn invalid(op: &'static str, message: impl Into<String>) -> GraphError {
    GraphError::Invalid {
        op,
        message: message.into(),
    }
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> GraphError {
    GraphError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Abs,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
        batch: usize,
    },
    Gather {
        source: Var,
        index: Vec<Option<usize>>,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
    },
    Unary(Var, Unary),
    Softmax(Var),
    Attention {
        query: Var,
        key: Var,
        value: Var,
        lengths: Vec<usize>,
        /// Row-major `len × len` probability block per batch entry, packed.
        probs: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask(Var, Vec<bool>),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Conv1d {
                input, weight, bias, ..
            }
            | Op::LayerNorm {
                input,
                gain: weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Attention { query, key, value, .. } => vec![*query, *key, *value],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::Unary(a, _)
            | Op::Softmax(a)
            | Op::Mask(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Gather { source, .. } => vec![*source],
            Op::Slice { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so parents always have smaller
/// indices than their children and the graph is acyclic by construction.
/// Gradients persist on leaf parameters only and accumulate across
/// [`Graph::backward`] calls until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, GraphError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(GraphError::NonFinite(name));
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GraphError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, GraphError> {
        let value = self.map(a, |x| x * factor);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, GraphError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape() != [ta.cols()] {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut value = ta.clone();
        let cols = ta.cols();
        for row in value.data_mut().chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddBias(a, bias), "add_bias")
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading axes are treated as rows.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var, GraphError> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.shape().len() != 2 || tw.shape()[0] != ta.cols() {
            return Err(mismatch("matmul", ta, tw));
        }
        let (rows, k, n) = (ta.rows(), ta.cols(), tw.cols());
        let mut out = vec![0.0; rows * n];
        mm_nn_acc(ta.data(), tw.data(), &mut out, rows, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out).expect("matmul shape");
        self.push(value, Op::MatMul(a, w), "matmul")
    }

    /// Batched product `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.batch_matmul(a, b, false)
    }

    /// Batched product with the second operand transposed,
    /// `[B,m,k] · [B,n,k]ᵀ -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, GraphError> {
        let op = if transpose_b { "bmm_nt" } else { "bmm" };
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((batch, m, k)), Some((batch_b, r1, r2))) = (as_batched(ta), as_batched(tb))
        else {
            return Err(mismatch(op, ta, tb));
        };
        let (kb, n) = if transpose_b { (r2, r1) } else { (r1, r2) };
        if batch != batch_b || k != kb {
            return Err(mismatch(op, ta, tb));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                mm_nt_acc(ab, bb, cb, m, k, n);
            } else {
                mm_nn_acc(ab, bb, cb, m, k, n);
            }
        }
        let shape = if ta.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::new(shape, out).expect("bmm shape");
        self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
                batch,
            },
            op,
        )
    }

    /// Row gather: output row `i` is `source` row `index[i]`, or zeros for
    /// `None`. Covers embedding lookup and length regulation.
    pub fn gather_rows(
        &mut self,
        source: Var,
        index: Vec<Option<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Var, GraphError> {
        let ts = self.value(source);
        let cols = ts.cols();
        if out_shape.last() != Some(&cols)
            || out_shape.iter().product::<usize>() != index.len() * cols
        {
            return Err(GraphError::ShapeMismatch {
                op: "gather_rows",
                lhs: ts.shape().to_vec(),
                rhs: out_shape,
            });
        }
        let rows = ts.rows();
        let mut out = vec![0.0; index.len() * cols];
        for (dst, idx) in out.chunks_mut(cols).zip(&index) {
            if let Some(r) = *idx {
                if r >= rows {
                    return Err(invalid(
                        "gather_rows",
                        format!("row {r} out of range for {rows} rows"),
                    ));
                }
                dst.copy_from_slice(ts.row(r));
            }
        }
        let value = Tensor::new(out_shape, out).expect("gather shape");
        self.push(value, Op::Gather { source, index }, "gather_rows")
    }

    /// Same-length 1-D convolution over `[B,L,Cin]` (or `[L,Cin]`) with
    /// weight `[K,Cin,Cout]`, odd `K`, and symmetric zero padding.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, GraphError> {
        let (tx, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let Some((batch, len, cin)) = as_batched(tx) else {
            return Err(mismatch("conv1d", tx, tw));
        };
        let ws = tw.shape();
        if ws.len() != 3 || ws[1] != cin {
            return Err(mismatch("conv1d", tx, tw));
        }
        let (kernel, cout) = (ws[0], ws[2]);
        if kernel % 2 == 0 {
            return Err(invalid("conv1d", format!("kernel size {kernel} must be odd")));
        }
        if tb.shape() != [cout] {
            return Err(mismatch("conv1d", tw, tb));
        }
        let mut out = vec![0.0; batch * len * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(tb.data());
        }
        for b in 0..batch {
            let x = &tx.data()[b * len * cin..(b + 1) * len * cin];
            let y = &mut out[b * len * cout..(b + 1) * len * cout];
            for k in 0..kernel {
                let Some((lo, hi, off)) = conv_span(k, kernel, len) else {
                    continue;
                };
                let rows = hi - lo;
                let src = lo.wrapping_add_signed(off);
                mm_nn_acc(
                    &x[src * cin..(src + rows) * cin],
                    &tw.data()[k * cin * cout..(k + 1) * cin * cout],
                    &mut y[lo * cout..hi * cout],
                    rows,
                    cin,
                    cout,
                );
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out).expect("conv shape");
        self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                batch,
            },
            "conv1d",
        )
    }

    fn unary(&mut self, a: Var, kind: Unary, name: &'static str) -> Result<Var, GraphError> {
        let value = match kind {
            Unary::Relu => self.map(a, |x| x.max(0.0)),
            Unary::Sigmoid => self.map(a, sigmoid),
            Unary::Softplus => self.map(a, softplus),
            Unary::Abs => self.map(a, f64::abs),
            Unary::Log => self.map(a, f64::ln),
            Unary::Exp => self.map(a, f64::exp),
        };
        self.push(value, Op::Unary(a, kind), name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Unary::Relu, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Unary::Sigmoid, "sigmoid")
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Unary::Softplus, "softplus")
    }

    /// Subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Unary::Abs, "abs")
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Unary::Log, "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GraphError> {
        self.unary(a, Unary::Exp, "exp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, GraphError> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis of `[B,m,n]` where `key_valid[b*n + j]`
    /// false forces column `j` of batch `b` to probability exactly zero.
    pub fn masked_softmax(
        &mut self,
        a: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var, GraphError> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut value = ta.clone();
        let per_batch = match key_valid {
            Some(mask) => {
                let Some((batch, m, n)) = as_batched(ta) else {
                    return Err(invalid("softmax", "masked softmax needs rank 2 or 3"));
                };
                if mask.len() != batch * n {
                    return Err(invalid(
                        "softmax",
                        format!("key mask has {} entries, expected {}", mask.len(), batch * n),
                    ));
                }
                Some((mask, m))
            }
            None => None,
        };
        for (r, row) in value.data_mut().chunks_mut(cols).enumerate() {
            let keys = per_batch.map(|(mask, m)| {
                let b = r / m;
                &mask[b * cols..(b + 1) * cols]
            });
            let keep = |j: usize| keys.map_or(true, |k| k[j]);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(invalid("softmax", "row has no unmasked entries"));
            }
            let mut total = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { (*x - max).exp() } else { 0.0 };
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(value, Op::Softmax(a), "softmax")
    }

    /// Dot-product attention over `[B,T,d]` queries and keys and `[B,T,e]`
    /// values, where batch entry `b` sees only its first `lengths[b]`
    /// positions. Equivalent to `bmm(masked_softmax(bmm_nt(q, k)), v)` on the
    /// valid rows; rows past the length are zero. Scaling is the caller's.
    pub fn attention(&mut self, query: Var, key: Var, value: Var, lengths: &[usize]) -> Result<Var, GraphError> {
        let (tq, tk, tv) = (self.value(query), self.value(key), self.value(value));
        let (Some((batch, t, d)), Some(kb), Some((vb, vt, e))) = (as_batched(tq), as_batched(tk), as_batched(tv)) else {
            return Err(invalid("attention", "operands must be rank 2 or 3"));
        };
        if kb != (batch, t, d) {
            return Err(mismatch("attention", tq, tk));
        }
        if (vb, vt) != (batch, t) {
            return Err(mismatch("attention", tq, tv));
        }
        if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(invalid("attention", format!("lengths {lengths:?} invalid for {batch} rows of {t}")));
        }
        let mut out = vec![0.0; batch * t * e];
        let mut probs = Vec::with_capacity(lengths.iter().map(|l| l * l).sum());
        for (b, &len) in lengths.iter().enumerate() {
            let q = &tq.data()[b * t * d..(b * t + len) * d];
            let k = &tk.data()[b * t * d..(b * t + len) * d];
            let v = &tv.data()[b * t * e..(b * t + len) * e];
            let start = probs.len();
            probs.resize(start + len * len, 0.0);
            let p = &mut probs[start..];
            mm_nt_acc(q, k, p, len, d, len);
            for row in p.chunks_exact_mut(len) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                let inv = 1.0 / total;
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            mm_nn_acc(p, v, &mut out[b * t * e..(b * t + len) * e], len, len, e);
        }
        let mut shape = tq.shape().to_vec();
        *shape.last_mut().unwrap() = e;
        let out = Tensor::new(shape, out).expect("attention shape");
        let op = Op::Attention {
            query,
            key,
            value,
            lengths: lengths.to_vec(),
            probs,
        };
        self.push(out, op, "attention")
    }

    /// The `len × len` attention probabilities of batch entry `b`, when `v`
    /// came from [`Graph::attention`].
    pub fn attention_weights(&self, v: Var, b: usize) -> Option<Tensor> {
        let Op::Attention { lengths, probs, .. } = &self.nodes[v.0].op else {
            return None;
        };
        let len = *lengths.get(b)?;
        let start: usize = lengths[..b].iter().map(|l| l * l).sum();
        Some(Tensor::new(vec![len, len], probs[start..start + len * len].to_vec()).expect("square"))
    }

    /// Layer normalization over the last axis followed by gain and bias.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var, GraphError> {
        let (tx, tg, tb) = (self.value(input), self.value(gain), self.value(bias));
        let cols = tx.cols();
        if tg.shape() != [cols] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [cols] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut normalized = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, x) in row.iter().enumerate() {
                let n = (x - mean) * inv;
                normalized.push(n);
                out.push(n * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("layer_norm shape");
        self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1/(1-rate)`. A rate of zero is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, GraphError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a).to_vec();
        let len = self.value(a).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(shape, mask).expect("dropout shape"));
        self.mul(a, mask)
    }

    /// Keeps entries where `keep` is true and zeroes the rest.
    pub fn mask(&mut self, a: Var, keep: Vec<bool>) -> Result<Var, GraphError> {
        let ta = self.value(a);
        if keep.len() != ta.len() {
            return Err(invalid(
                "mask",
                format!("{} mask entries for shape {:?}", keep.len(), ta.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { 0.0 })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("mask shape");
        self.push(value, Op::Mask(a, keep), "mask")
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat", "nothing to concatenate"));
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", self.value(first), self.value(p)));
            }
            cols += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(cols);
        let value = Tensor::new(shape, out).expect("concat shape");
        self.push(value, Op::Concat(parts.to_vec()), "concat")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let ta = self.value(a);
        let cols = ta.cols();
        if len == 0 || start + len > cols {
            return Err(invalid(
                "slice",
                format!("columns {start}..{} out of range for width {cols}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(ta.rows() * len);
        for row in ta.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out).expect("slice shape");
        self.push(value, Op::Slice { input: a, start }, "slice")
    }

    /// Splits the last axis into `parts` equal pieces.
    pub fn split_last(&mut self, a: Var, parts: usize) -> Result<Vec<Var>, GraphError> {
        let cols = self.value(a).cols();
        if parts == 0 || cols % parts != 0 {
            return Err(invalid(
                "split",
                format!("width {cols} not divisible into {parts} parts"),
            ));
        }
        let width = cols / parts;
        (0..parts)
            .map(|i| self.slice_last(a, i * width, width))
            .collect()
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GraphError> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GraphError> {
        let t = self.value(a);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(mean), Op::Mean(a), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GraphError> {
        let ta = self.value(a);
        let value = Tensor::new(shape.clone(), ta.data().to_vec()).map_err(|_| {
            GraphError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape,
            }
        })?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Propagates `∂loss/∂·` to every parameter reachable from `loss`,
    /// adding into any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GraphError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let g = g.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape"))),
                Op::Add(a, b) => {
                    add_into(&mut grads, nodes, *a, g, 1.0);
                    add_into(&mut grads, nodes, *b, g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, nodes, *a, g, 1.0);
                    add_into(&mut grads, nodes, *b, g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                            *d += gi * y;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                            *d += gi * x;
                        }
                    }
                }
                Op::Scale(a, c) => add_into(&mut grads, nodes, *a, g, *c),
                Op::AddBias(a, bias) => {
                    add_into(&mut grads, nodes, *a, g, 1.0);
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        let cols = gb.len();
                        for row in g.chunks(cols) {
                            for (d, &x) in gb.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::MatMul(a, w) => {
                    let (ta, tw) = (&nodes[a.0].value, &nodes[w.0].value);
                    let (rows, k, n) = (ta.rows(), ta.cols(), tw.cols());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        mm_nt_acc(g, tw.data(), ga, rows, n, k);
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        mm_tn_acc(ta.data(), g, gw, rows, k, n);
                    }
                }
                Op::BatchMatMul {
                    a,
                    b,
                    transpose_b,
                    batch,
                } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let m = ta.len() / batch / ta.cols();
                    let k = ta.cols();
                    let n = tb.len() / batch / k;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..*batch {
                            let gb = &g[i * m * n..(i + 1) * m * n];
                            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
                            let out = &mut ga[i * m * k..(i + 1) * m * k];
                            if *transpose_b {
                                mm_nn_acc(gb, bb, out, m, n, k);
                            } else {
                                mm_nt_acc(gb, bb, out, m, n, k);
                            }
                        }
                    }
                    if let Some(gbv) = slot(&mut grads, nodes, *b) {
                        for i in 0..*batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
                            let out = &mut gbv[i * k * n..(i + 1) * k * n];
                            if *transpose_b {
                                mm_tn_acc(gi, ab, out, m, n, k);
                            } else {
                                mm_tn_acc(ab, gi, out, m, k, n);
                            }
                        }
                    }
                }
                Op::Gather { source, index } => {
                    if let Some(gs) = slot(&mut grads, nodes, *source) {
                        let cols = nodes[source.0].value.cols();
                        for (row, idx) in g.chunks(cols).zip(index) {
                            if let Some(r) = *idx {
                                for (d, &x) in gs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                                    *d += x;
                                }
                            }
                        }
                    }
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    batch,
                } => {
                    let (tx, tw) = (&nodes[input.0].value, &nodes[weight.0].value);
                    let (kernel, cin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                    let len = tx.len() / batch / cin;
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        for b in 0..*batch {
                            let gy = &g[b * len * cout..(b + 1) * len * cout];
                            let gxb = &mut gx[b * len * cin..(b + 1) * len * cin];
                            for k in 0..kernel {
                                let Some((lo, hi, off)) = conv_span(k, kernel, len) else {
                                    continue;
                                };
                                let src = lo.wrapping_add_signed(off);
                                let rows = hi - lo;
                                mm_nt_acc(
                                    &gy[lo * cout..hi * cout],
                                    &tw.data()[k * cin * cout..(k + 1) * cin * cout],
                                    &mut gxb[src * cin..(src + rows) * cin],
                                    rows,
                                    cout,
                                    cin,
                                );
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *weight) {
                        for b in 0..*batch {
                            let gy = &g[b * len * cout..(b + 1) * len * cout];
                            let x = &tx.data()[b * len * cin..(b + 1) * len * cin];
                            for k in 0..kernel {
                                let Some((lo, hi, off)) = conv_span(k, kernel, len) else {
                                    continue;
                                };
                                let src = lo.wrapping_add_signed(off);
                                let rows = hi - lo;
                                mm_tn_acc(
                                    &x[src * cin..(src + rows) * cin],
                                    &gy[lo * cout..hi * cout],
                                    &mut gw[k * cin * cout..(k + 1) * cin * cout],
                                    rows,
                                    cin,
                                    cout,
                                );
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for row in g.chunks(cout) {
                            for (d, &x) in gb.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Unary(a, kind) => {
                    let x = nodes[a.0].value.data();
                    let y = node.value.data();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for i in 0..ga.len() {
                            let local = match kind {
                                Unary::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Softplus => sigmoid(x[i]),
                                Unary::Abs => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else if x[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Log => 1.0 / x[i],
                                Unary::Exp => y[i],
                            };
                            ga[i] += g[i] * local;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gout, yrow), grow) in
                            ga.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.chunks(cols))
                        {
                            let inner = dot(grow, yrow);
                            for ((d, &yi), &gi) in gout.iter_mut().zip(yrow).zip(grow) {
                                *d += yi * (gi - inner);
                            }
                        }
                    }
                }
                Op::Attention {
                    query,
                    key,
                    value,
                    lengths,
                    probs,
                } => {
                    let (tq, tv) = (&nodes[query.0].value, &nodes[value.0].value);
                    let (t, d, e) = (tq.len() / lengths.len() / tq.cols(), tq.cols(), tv.cols());
                    let mut offset = 0;
                    for (b, &len) in lengths.iter().enumerate() {
                        let p = &probs[offset..offset + len * len];
                        offset += len * len;
                        let gb = &g[b * t * e..(b * t + len) * e];
                        let (qs, ks) = (b * t * d..(b * t + len) * d, b * t * e..(b * t + len) * e);
                        if let Some(gv) = slot(&mut grads, nodes, *value) {
                            add_transposed(&mut gv[ks.clone()], &transpose(gb, len, e), p, len);
                        }
                        let qk_needed = nodes[query.0].requires_grad || nodes[key.0].requires_grad;
                        if !qk_needed {
                            continue;
                        }
                        // Gradient through the softmax, scores first.
                        let mut ds = vec![0.0; len * len];
                        mm_nt_acc(gb, &tv.data()[ks], &mut ds, len, e, len);
                        for (drow, prow) in ds.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                            let inner = dot(drow, prow);
                            for (x, &pi) in drow.iter_mut().zip(prow) {
                                *x = pi * (*x - inner);
                            }
                        }
                        let tk = &nodes[key.0].value;
                        if let Some(gq) = slot(&mut grads, nodes, *query) {
                            mm_nn_acc(&ds, &tk.data()[qs.clone()], &mut gq[qs.clone()], len, len, d);
                        }
                        if let Some(gk) = slot(&mut grads, nodes, *key) {
                            add_transposed(&mut gk[qs.clone()], &transpose(&tq.data()[qs], len, d), &ds, len);
                        }
                    }
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let tg = nodes[gain.0].value.data();
                    let cols = tg.len();
                    if let Some(gx) = slot(&mut grads, nodes, *input) {
                        let n = cols as f64;
                        let mut ghat = vec![0.0; cols];
                        for (r, ((gout, grow), xhat)) in gx
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(normalized.chunks(cols))
                            .enumerate()
                        {
                            for j in 0..cols {
                                ghat[j] = grow[j] * tg[j];
                            }
                            let sum_g: f64 = ghat.iter().sum();
                            let sum_gx = dot(&ghat, xhat);
                            let scale = inv_std[r] / n;
                            for j in 0..cols {
                                gout[j] += scale * (n * ghat[j] - sum_g - xhat[j] * sum_gx);
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gain) {
                        for (grow, xhat) in g.chunks(cols).zip(normalized.chunks(cols)) {
                            for j in 0..cols {
                                gg[j] += grow[j] * xhat[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for grow in g.chunks(cols) {
                            for (d, &x) in gb.iter_mut().zip(grow) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Mask(a, keep) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((d, &gi), &k) in ga.iter_mut().zip(g).zip(keep) {
                            if k {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let mut start = 0;
                    for &p in parts {
                        let width = nodes[p.0].value.cols();
                        if let Some(gp) = slot(&mut grads, nodes, p) {
                            for (dst, src) in gp.chunks_mut(width).zip(g.chunks(total)) {
                                for (d, &x) in dst.iter_mut().zip(&src[start..start + width]) {
                                    *d += x;
                                }
                            }
                        }
                        start += width;
                    }
                }
                Op::Slice { input, start } => {
                    let width = node.value.cols();
                    let total = nodes[input.0].value.cols();
                    if let Some(ga) = slot(&mut grads, nodes, *input) {
                        for (dst, src) in ga.chunks_mut(total).zip(g.chunks(width)) {
                            for (d, &x) in dst[*start..*start + width].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for d in ga.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let share = g[0] / ga.len() as f64;
                        for d in ga.iter_mut() {
                            *d += share;
                        }
                    }
                }
                Op::Reshape(a) => add_into(&mut grads, nodes, *a, g, 1.0),
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => {
                    for (d, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *d += x;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, created on first use; `None` when `v` does not
/// need a gradient.
fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let entry = &mut grads[v.0];
    Some(
        entry
            .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
            .data_mut(),
    )
}

fn add_into(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: &[f64], factor: f64) {
    if let Some(d) = slot(grads, nodes, v) {
        for (d, &x) in d.iter_mut().zip(g) {
            *d += factor * x;
        }
    }
}

/// `out[len,w] += (xt[w,len] · m[len,len])ᵀ`: a transposed-left product
/// arranged so the long axis stays innermost.
fn add_transposed(out: &mut [f64], xt: &[f64], m: &[f64], len: usize) {
    let w = xt.len() / len;
    let mut tmp = vec![0.0; w * len];
    mm_nn_acc(xt, m, &mut tmp, w, len, len);
    for (c, row) in tmp.chunks_exact(len).enumerate() {
        for (j, &x) in row.iter().enumerate() {
            out[j * w + c] += x;
        }
    }
}

/// `(batch, rows, cols)` view of a rank-2 or rank-3 tensor.
fn as_batched(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

/// Output rows `lo..hi` that kernel tap `k` reaches, and the signed offset to
/// the input row.
fn conv_span(k: usize, kernel: usize, len: usize) -> Option<(usize, usize, isize)> {
    let off = k as isize - (kernel / 2) as isize;
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).min(len as isize);
    if hi <= lo as isize {
        return None;
    }
    Some((lo, hi as usize, off))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
