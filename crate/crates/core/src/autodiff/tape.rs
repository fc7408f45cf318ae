use std::rc::Rc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Binary(BinKind, Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Embedding(Var, Vec<usize>),
    CrossEntropy(Var, Vec<Option<usize>>, Vec<f64>),
    BceLogits(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; `backward` walks it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the per-op non-finite output check (on by default in debug builds).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// A trainable leaf; its gradient is kept after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- elementwise binary ops with broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
        let t = Tensor::new(&out_shape, out)?;
        self.push(name, t, Op::Binary(kind, a, b), &[a, b])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| scale * x + shift).collect())?;
        self.push("affine", t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    // ---- linear algebra ----

    /// Batched matrix product over the last two axes. Either side may be a
    /// plain matrix, in which case it is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geo = MatGeom::new(&sa, &sb)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        for bi in 0..geo.batch {
            let ao = geo.a_off(bi);
            let bo = geo.b_off(bi);
            let co = bi * geo.m * geo.n;
            for i in 0..geo.m {
                let crow = &mut out[co + i * geo.n..co + (i + 1) * geo.n];
                for p in 0..geo.k {
                    let aip = av[ao + i * geo.k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[bo + p * geo.n..bo + (p + 1) * geo.n];
                    for (c, bpj) in crow.iter_mut().zip(brow) {
                        *c += aip * bpj;
                    }
                }
            }
        }
        let t = Tensor::new(&geo.out_shape, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let v = self.value(x).data();
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = v[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let t = Tensor::new(&shape, out)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let v = self.value(*p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, out)?;
        self.push("concat", t, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("slice", &s, &[start, end]))?;
        if start >= end || end > w {
            return Err(Error::shape("slice", &s, &[start, end]));
        }
        let rows = s[..s.len() - 1].iter().product::<usize>();
        let v = self.value(x).data();
        let nw = end - start;
        let mut out = Vec::with_capacity(rows * nw);
        for r in 0..rows {
            out.extend_from_slice(&v[r * w + start..r * w + end]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = nw;
        let t = Tensor::new(&shape, out)?;
        self.push("slice", t, Op::Slice(x, start, end), &[x])
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    // ---- pointwise nonlinearities ----

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&z| f(z)).collect())?;
        self.push(name, t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |z| z.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "gelu",
            x,
            |z| 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. `blocked[i] == true` removes entry `i`
    /// from its row; a row with every entry blocked yields all zeros.
    pub fn softmax_masked(&mut self, x: Var, blocked: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let w = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        if let Some(m) = &blocked {
            if m.len() != v.numel() {
                return Err(Error::shape("softmax", &shape, &[m.len()]));
            }
        }
        let data = v.data();
        let mut out = vec![0.0; data.len()];
        for r in 0..data.len() / w.max(1) {
            let row = &data[r * w..(r + 1) * w];
            let keep = |j: usize| blocked.as_ref().is_none_or(|m| !m[r * w + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &z) in row.iter().enumerate() {
                if keep(j) && z > max {
                    max = z;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * w..(r + 1) * w];
            let mut denom = 0.0;
            for j in 0..w {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    denom += o[j];
                }
            }
            for z in o.iter_mut() {
                *z /= denom;
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Normalize each row of the last axis to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let w = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        let data = v.data();
        let rows = data.len() / w;
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, z) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (z - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(&shape, out)?;
        self.push("layer_norm", t, Op::LayerNorm(x, inv_std), &[x])
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, shape `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", &s, &[ids.len()]));
        }
        let (rows, d) = (s[0], s[1]);
        let v = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("embedding", &s, &[id]));
            }
            out.extend_from_slice(&v[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        self.push("embedding", t, Op::Embedding(table, ids.to_vec()), &[table])
    }

    /// Mean token cross-entropy of `logits` (`[n, vocab]`) against `targets`,
    /// skipping positions whose target equals `ignore`. Zero when every
    /// position is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let v = s[1];
        let data = self.value(logits).data();
        let mut probs = vec![0.0; data.len()];
        let mut kept = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            for (p, z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            if Some(t) == ignore {
                kept.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::shape("cross_entropy", &s, &[t]));
            }
            total += lse - row[t];
            kept.push(Some(t));
        }
        let count = kept.iter().filter(|k| k.is_some()).count();
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy(logits, kept, probs), &[logits])
    }

    /// Mean binary cross-entropy of raw logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.numel() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce_with_logits", v.shape(), &[labels.len()]));
        }
        let n = labels.len() as f64;
        let loss = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push("bce_with_logits", Tensor::scalar(loss), Op::BceLogits(logits, labels.to_vec()), &[logits])
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = Tensor::new(v.shape(), v.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        self.push("dropout", t, Op::Dropout(x, mask), &[x])
    }

    // ---- reverse pass ----

    /// Propagate d(loss)/d(node) back through the tape and add the result into
    /// every trainable leaf's gradient buffer. Calling this twice without
    /// [`Tape::zero_grads`] accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let kind = *kind;
                acc(*a, &mut |ga| {
                    for_each_broadcast(out.shape(), sa, sb, |o, ia, ib| {
                        ga[ia] += match kind {
                            BinKind::Add | BinKind::Sub => g[o],
                            BinKind::Mul => g[o] * bv[ib],
                        }
                    })
                });
                acc(*b, &mut |gb| {
                    for_each_broadcast(out.shape(), sa, sb, |o, ia, ib| {
                        gb[ib] += match kind {
                            BinKind::Add => g[o],
                            BinKind::Sub => -g[o],
                            BinKind::Mul => g[o] * av[ia],
                        }
                    })
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let geo = MatGeom::new(ta.shape(), tb.shape()).expect("checked in forward");
                let (av, bv) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    for bi in 0..geo.batch {
                        let (ao, bo, co) = (geo.a_off(bi), geo.b_off(bi), bi * geo.m * geo.n);
                        for i in 0..geo.m {
                            let grow = &g[co + i * geo.n..co + (i + 1) * geo.n];
                            for p in 0..geo.k {
                                let brow = &bv[bo + p * geo.n..bo + (p + 1) * geo.n];
                                ga[ao + i * geo.k + p] += dot(grow, brow);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..geo.batch {
                        let (ao, bo, co) = (geo.a_off(bi), geo.b_off(bi), bi * geo.m * geo.n);
                        for i in 0..geo.m {
                            let grow = &g[co + i * geo.n..co + (i + 1) * geo.n];
                            for p in 0..geo.k {
                                let aip = av[ao + i * geo.k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let gbrow = &mut gb[bo + p * geo.n..bo + (p + 1) * geo.n];
                                for (x, y) in gbrow.iter_mut().zip(grow) {
                                    *x += aip * y;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = out.shape();
                // out is [.., c, r]; input was [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = out.numel() / (r * c);
                acc(*x, &mut |gx| {
                    for b in 0..batch {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.numel() / total;
                let mut col = 0;
                for p in parts {
                    let w = *nodes[p.0].value.shape().last().unwrap();
                    acc(*p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::Slice(x, start, end) => {
                let w = *nodes[x.0].value.shape().last().unwrap();
                let nw = end - start;
                let rows = out.numel() / nw;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for j in 0..nw {
                            gx[r * w + start + j] += g[r * nw + j];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n))
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let z = xv[i];
                        let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                        gx[i] += g[i] * d;
                    }
                })
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                })
            }
            Op::Softmax(x) => {
                let y = out.data();
                let w = *out.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / w {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let s = dot(yr, gr);
                        for j in 0..w {
                            gx[r * w + j] += yr[j] * (gr[j] - s);
                        }
                    }
                })
            }
            Op::LayerNorm(x, inv_std) => {
                let y = out.data();
                let w = *out.shape().last().unwrap();
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let mg = gr.iter().sum::<f64>() / w as f64;
                        let mgy = dot(gr, yr) / w as f64;
                        for j in 0..w {
                            gx[r * w + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                })
            }
            Op::Embedding(table, ids) => {
                let d = *out.shape().last().unwrap();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                })
            }
            Op::CrossEntropy(logits, kept, probs) => {
                let v = nodes[logits.0].value.shape()[1];
                let count = kept.iter().filter(|k| k.is_some()).count();
                if count == 0 {
                    return;
                }
                let scale = g[0] / count as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in kept.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                })
            }
            Op::BceLogits(logits, labels) => {
                let z = nodes[logits.0].value.data();
                let n = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for i in 0..gl.len() {
                        gl[i] += g[0] * (sigmoid(z[i]) - labels[i]) / n;
                    }
                })
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct MatGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", sa, sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (lead, a_batched, b_batched) = if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else if ba == bb {
            (ba.to_vec(), true, true)
        } else {
            return Err(err());
        };
        let batch = lead.iter().product();
        let mut out_shape = lead;
        out_shape.extend([m, n]);
        Ok(MatGeom {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
            out_shape,
        })
    }

    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }
}

/// Right-aligned broadcast: axes must be equal or 1 on one side.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if sa == out && sb == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let nb: usize = sb.iter().product();
    if sa == out && nb > 0 && out.ends_with(sb) {
        (0..n).for_each(|i| f(i, i, i % nb));
        return;
    }
    let na: usize = sa.iter().product();
    if sb == out && na > 0 && out.ends_with(sa) {
        (0..n).for_each(|i| f(i, i % na, i));
        return;
    }
    let (st_a, st_b) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += st_a[d];
            ib += st_b[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= st_a[d] * out[d];
            ib -= st_b[d] * out[d];
            idx[d] = 0;
        }
    }
}
