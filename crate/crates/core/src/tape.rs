//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive appends
//! one node holding its output value, so node order is always a valid
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{contract, Error, Result};
use crate::kernels::{add_into, gemm, permute_into};
use crate::tensor::Tensor;

/// Variance guard added before the square root in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.7978845608;
const GELU_A: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        lhs: Var,
        rhs: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        out_chunk: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Permute { x, .. }
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`], keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericDomain { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Input node ids of every node, in recording order.
    pub fn edges(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().into_iter().map(Var::id).collect())
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `[..., m, k] · [..., k, n]` with identical leading axes, or
    /// `[..., m, k] · [k, n]` with a shared right-hand matrix.
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs).to_vec();
        if ls.len() < 2 || rs.len() < 2 {
            return dim_err("matmul", &ls, &rs);
        }
        let k = ls[ls.len() - 1];
        let n = rs[rs.len() - 1];
        if rs[rs.len() - 2] != k {
            return dim_err("matmul", &ls, &rs);
        }
        let (batch, m) = if rs.len() == 2 {
            (1, ls[..ls.len() - 1].iter().product())
        } else {
            if ls.len() != rs.len() || ls[..ls.len() - 2] != rs[..rs.len() - 2] {
                return dim_err("matmul", &ls, &rs);
            }
            (ls[..ls.len() - 2].iter().product(), ls[ls.len() - 2])
        };
        let mut out_shape = ls.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        {
            let a = self.value(lhs).data();
            let b = self.value(rhs).data();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a[bi * m * k..(bi + 1) * m * k],
                    false,
                    &b[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    0.0,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                lhs,
                rhs,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return dim_err(op, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a bias vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.last_dim();
        if vb.rank() != 1 || vb.numel() != n {
            return dim_err("add_bias", vx.shape(), vb.shape());
        }
        let b = vb.data();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            add_into(row, b);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return contract("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", &base, &[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut axis_len = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return dim_err("concat", &base, s);
            }
            axis_len += s[axis];
            chunks.push(s[axis] * inner);
        }
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return dim_err("slice", &shape, &[axis, start, len]);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_chunk = shape[axis] * inner;
        let out_chunk = len * inner;
        let offset = start * inner;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            let base = o * in_chunk + offset;
            out.extend_from_slice(&src[base..base + out_chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                in_chunk,
                offset,
                out_chunk,
            },
        ))
    }

    /// Selects rows of `x` viewed as `[numel / C, C]`, `C` the trailing
    /// axis. The result has shape `out_leading ++ [C]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize], out_leading: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let n_rows = if c == 0 { 0 } else { vx.numel() / c };
        if out_leading.iter().product::<usize>() != rows.len() {
            return dim_err("gather_rows", out_leading, &[rows.len()]);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return contract(format!("gather_rows: row {bad} out of range for {n_rows} rows"));
        }
        let src = vx.data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let mut shape = out_leading.to_vec();
        shape.push(c);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Embedding lookup: `table[ids]` with output shape `ids_shape ++ [hidden]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        if self.value(table).rank() != 2 {
            return dim_err("embedding", self.shape(table), ids_shape);
        }
        self.gather_rows(table, ids, ids_shape)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        ensure_finite("softmax", vx)?;
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_row(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        ensure_finite("log_softmax", vx)?;
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    /// Normalizes over the trailing axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        ensure_finite("layer_norm", vx)?;
        let n = vx.last_dim();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.numel() != n || vb.numel() != n || vg.rank() != 1 || vb.rank() != 1 {
            return dim_err("layer_norm", vx.shape(), vg.shape());
        }
        let rows = if n == 0 { 0 } else { vx.numel() / n };
        let mut xhat = vx.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; vx.numel()];
        for (r, row) in xhat.chunks_mut(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let o = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                row[j] = (row[j] - mean) * is;
                o[j] = row[j] * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return dim_err("permute", &shape, axes);
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut out = vec![0.0; self.value(x).numel()];
        permute_into(self.value(x).data(), &shape, axes, &mut out, false);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return dim_err("transpose", self.shape(x), &[]);
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return contract("mean of an empty tensor");
        }
        let m = vx.data().iter().sum::<f64>() / vx.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    /// Reverse sweep from a scalar `loss` to every leaf that requires
    /// gradient. Leaves the loss does not reach receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let targets: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        self.sweep(loss, targets)
    }

    /// Like [`Tape::backward`] but only propagates along paths that lead
    /// to `wrt`, so gradients of unrelated leaves are never computed.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Gradients> {
        let mut targets = vec![false; self.nodes.len()];
        for v in wrt {
            if !matches!(self.nodes[v.0].op, Op::Leaf) {
                return contract("backward_wrt targets must be leaves");
            }
            targets[v.0] = true;
        }
        self.sweep(loss, targets)
    }

    fn sweep(&self, loss: Var, targets: Vec<bool>) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let end = loss.0 + 1;
        let mut active = targets;
        active.truncate(end);
        for i in 0..end {
            if !active[i] {
                active[i] = self.nodes[i].op.inputs().iter().any(|v| active[v.0]);
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..end).rev() {
            if !active[i] {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &active, &mut grads);
        }
        let mut map = BTreeMap::new();
        for (i, node) in self.nodes[..end].iter().enumerate() {
            if active[i] && matches!(node.op, Op::Leaf) {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(i, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        // leaves after the loss cannot be reached
        Ok(Gradients { map })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], active: &[bool], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! slot {
            ($v:expr) => {{
                let len = self.nodes[$v.0].value.numel();
                grads[$v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                lhs,
                rhs,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if active[lhs.0] {
                    let b = val(*rhs);
                    let da = slot!(*lhs);
                    for bi in 0..*batch {
                        let bb = if *batch == 1 { b } else { &b[bi * k * n..(bi + 1) * k * n] };
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            bb,
                            true,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if active[rhs.0] {
                    let a = val(*lhs);
                    let db = slot!(*rhs);
                    for bi in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            &a[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if active[v.0] {
                        add_into(slot!(v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if active[a.0] {
                    add_into(slot!(*a), g);
                }
                if active[b.0] {
                    for (d, s) in slot!(*b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if active[a.0] {
                    let other = val(*b);
                    for ((d, s), o) in slot!(*a).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
                if active[b.0] {
                    let other = val(*a);
                    for ((d, s), o) in slot!(*b).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if active[x.0] {
                    add_into(slot!(*x), g);
                }
                if active[bias.0] {
                    let db = slot!(*bias);
                    let n = db.len();
                    for row in g.chunks(n.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if active[x.0] {
                    for (d, s) in slot!(*x).iter_mut().zip(g) {
                        *d += factor * s;
                    }
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if active[v.0] {
                        let dv = slot!(v);
                        for o in 0..*outer {
                            add_into(&mut dv[o * c..(o + 1) * c], &g[o * total + start..o * total + start + c]);
                        }
                    }
                    start += c;
                }
            }
            Op::Slice {
                x,
                outer,
                in_chunk,
                offset,
                out_chunk,
            } => {
                if active[x.0] {
                    let dx = slot!(*x);
                    for o in 0..*outer {
                        let base = o * in_chunk + offset;
                        add_into(&mut dx[base..base + out_chunk], &g[o * out_chunk..(o + 1) * out_chunk]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if active[x.0] {
                    let c = self.nodes[x.0].value.last_dim();
                    let dx = slot!(*x);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Softmax(x) => {
                if active[x.0] {
                    let y = node.value.data();
                    let c = node.value.last_dim().max(1);
                    let dx = slot!(*x);
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if active[x.0] {
                    let y = node.value.data();
                    let c = node.value.last_dim().max(1);
                    let dx = slot!(*x);
                    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.nodes[gain.0].value.numel();
                if active[x.0] {
                    let gv = val(*gain);
                    let dx = slot!(*x);
                    let mut dxhat = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += is * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                if active[gain.0] {
                    let dg = slot!(*gain);
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if active[bias.0] {
                    let db = slot!(*bias);
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Gelu(x) => {
                if active[x.0] {
                    let xv = val(*x);
                    for ((d, s), &v) in slot!(*x).iter_mut().zip(g).zip(xv) {
                        *d += s * gelu_grad(v);
                    }
                }
            }
            Op::Permute { x, axes } => {
                if active[x.0] {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    permute_into(g, node.value.shape(), &inverse, slot!(*x), true);
                }
            }
            Op::Reshape(x) => {
                if active[x.0] {
                    add_into(slot!(*x), g);
                }
            }
            Op::Sum(x) => {
                if active[x.0] {
                    slot!(*x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if active[x.0] {
                    let dx = slot!(*x);
                    let scale = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += scale);
                }
            }
        }
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &t(&[2, 1], &[3.0, 7.0]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([2]));
        let p = tape.softmax(z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[0.0, f64::NAN]));
        assert!(matches!(tape.softmax(z), Err(Error::NumericDomain { .. })));
        let z = tape.constant(t(&[2], &[f64::INFINITY, 0.0]));
        assert!(matches!(tape.log_softmax(z), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn layer_norm_of_centered_unit_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-6 && (out[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_of_constant_row_is_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 3.0));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[3], &[0.3, -1.2, 2.0]));
        let p = tape.softmax(z).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(z).unwrap().data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn matmul_chain_gradient_is_ones_times_b_transpose() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -3.0, 1.5]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        // (ones[2x2] · Bᵀ)[i][p] = Σ_j B[p][j]
        let row = [0.5 - 1.0, 2.0 + 0.25, -3.0 + 1.5];
        let want: Vec<f64> = row.iter().chain(row.iter()).copied().collect();
        assert_eq!(grads.get(a).unwrap().data(), want.as_slice());
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([2], 1.0));
        let unused = tape.param(Tensor::full([3], 1.0));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full([2], 1.0));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn edges_are_topologically_ordered() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full([2, 2], 1.0));
        let b = tape.matmul(a, a).unwrap();
        let c = tape.gelu(b);
        let _ = tape.sum(c);
        for (i, inputs) in tape.edges().iter().enumerate() {
            assert!(inputs.iter().all(|&j| j < i));
        }
    }

    #[test]
    fn backward_wrt_skips_other_leaves() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(t(&[1, 2], &[0.5, -0.5]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let full = tape.backward(s).unwrap();
        let partial = tape.backward_wrt(s, &[x]).unwrap();
        assert!(partial.get(w).is_none());
        assert_eq!(partial.get(x), full.get(x));
    }
}
