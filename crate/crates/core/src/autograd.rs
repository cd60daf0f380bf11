//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every node created during a forward pass. Nodes are
//! appended in evaluation order, so the tape index order is already a
//! topological order of the lineage DAG and [`Graph::backward`] simply walks
//! it in reverse. Only first-order gradients are supported.

use crate::error::{GtnError, Result};
use crate::rng::Rng;
use crate::tensor::{axis_split, matmul_into, Mask, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulConst(Var, Vec<f64>),
    Tanh(Var),
    Relu(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, present after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GtnError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("zip_map keeps shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias`, with a 1-D `bias` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(GtnError::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x · w + b` for a matrix `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(GtnError::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(GtnError::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let factors = c.data().to_vec();
        Ok(self.mul_factors(x, factors))
    }

    fn mul_factors(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().zip(&factors).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("mul_factors keeps shape");
        self.push(out, Op::MulConst(x, factors), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn transpose(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        self.transpose(x, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(GtnError::Empty("concat input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(GtnError::InvalidShape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GtnError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(GtnError::InvalidShape(format!(
                "slice {start}..{end} on axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Softmax along `axis`. Disallowed mask entries come out as exactly 0;
    /// a slice with no allowed entry is an error.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GtnError::InvalidShape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let mask = mask.map(|m| m.broadcast_to(&shape)).transpose()?;
        let allowed = |i: usize| mask.as_ref().is_none_or(|m| m.allowed()[i]);
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .filter(|&k| allowed(at(k)))
                    .map(|k| src[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(GtnError::DegenerateSoftmax {
                        slice: o * inner + i,
                    });
                }
                let mut denom = 0.0;
                for k in 0..len {
                    if allowed(at(k)) {
                        let e = (src[at(k)] - max).exp();
                        out[at(k)] = e;
                        denom += e;
                    }
                }
                for k in 0..len {
                    out[at(k)] /= denom;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(GtnError::Param(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(GtnError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / n);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity when
    /// not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(GtnError::Param(format!(
                "dropout p must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let factors = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        Ok(self.mul_factors(x, factors))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(GtnError::InvalidShape(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(GtnError::Label {
                label: bad,
                n_classes: k,
            });
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (row, &label) in src.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Accumulates d`loss`/d`leaf` into every leaf that requires a gradient.
    /// Repeated calls accumulate; use [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(GtnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                match &mut node.grad {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = self.value(*b).t().unwrap();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.value(*a).t().unwrap();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, g.to_vec());
                acc(*b, db);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                acc(*x, g.iter().map(|v| v * sv).collect());
                acc(*s, vec![g.iter().zip(xv).map(|(g, x)| g * x).sum()]);
            }
            Op::MulConst(x, c) => acc(*x, g.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap();
                acc(*x, gt.permute(&inverse).unwrap().into_data());
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        dp.extend_from_slice(&g[base..base + chunk]);
                    }
                    offset += chunk;
                    acc(p, dp);
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                let mut dx = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    dx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, hrow), is) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dh = grow[j] * gm[j];
                        dx.push(is / nf * (nf * dh - sum_dh - hrow[j] * sum_dh_h));
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    /// Compares reverse-mode gradients of `build` against central differences.
    /// The loss is a fixed random weighting of the output so every entry
    /// contributes.
    fn check_grads(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let run = |vals: &[Tensor], weights: Option<&Tensor>| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let w = match weights {
                Some(w) => w.clone(),
                None => random_tensor(g.shape(out), &mut Rng::new(99, Purpose::Init)),
            };
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv).unwrap();
            let loss = g.sum(prod);
            (g, vars, loss, w)
        };
        let (mut g, vars, loss, weights) = run(inputs, None);
        g.backward(loss).unwrap();
        let loss_at = |vals: &[Tensor]| {
            let (g, _, loss, _) = run(vals, Some(&weights));
            g.value(loss).data()[0]
        };

        let h = 1e-5;
        for (vi, input) in inputs.iter().enumerate() {
            let ad = g.grad(vars[vi]).expect("leaf grad missing");
            for e in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[e] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = ad.data()[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "input {vi} entry {e}: ad={a} fd={fd} rel={rel}");
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
        let s = g.softmax(x, 0, None).unwrap();
        assert!((g.value(s).data()[0] - 0.75).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.25).abs() < 1e-15);

        let x = g.constant(Tensor::vector(vec![5.0, 9.0, 2.0]));
        let m = Mask::new(vec![3], vec![true, false, true]).unwrap();
        let s = g.softmax(x, 0, Some(&m)).unwrap();
        let expect = 5f64.exp() / (5f64.exp() + 2f64.exp());
        let out = g.value(s).data();
        assert!((out[0] - expect).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - (1.0 - expect)).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let m = Mask::new(vec![2, 2], vec![true, true, false, false]).unwrap();
        assert!(matches!(
            g.softmax(x, 1, Some(&m)),
            Err(GtnError::DegenerateSoftmax { slice: 1 })
        ));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 3f64.ln()]]).unwrap());
        let s = g.softmax(x, 0, None).unwrap();
        let v = g.value(s);
        assert!((v.get(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((v.get(&[1, 1]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gamma2 = g.constant(Tensor::ones(&[2]));
        let beta2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![-1.0, 1.0]));
        let y = g.layer_norm(x, gamma2, beta2, 1e-300).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let var: f64 = 2.0 / 3.0;
        let expect = [-1.0, 0.0, 1.0].map(|d: f64| d / (var + 1e-5).sqrt());
        for (o, e) in g.value(y).data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-10);
        }
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn elementwise_and_shape_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let t = g.tanh(z);
        assert_eq!(g.value(t).data(), &[0.0]);

        let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let xt = g.t(x).unwrap();
        let xtt = g.t(xt).unwrap();
        assert_eq!(g.value(xtt), g.value(x));

        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let back = g.slice(c, 0, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
    }

    #[test]
    fn dropout_examples() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1, Purpose::Dropout);
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, &mut rng, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let mut g = Graph::new();
        let mut rng = Rng::new(2024, Purpose::Dropout);
        let x = g.constant(Tensor::ones(&[n]));
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        let out = g.value(y).data();
        let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "survivors {survivors}");
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let ce = g.cross_entropy(l, &[0]).unwrap();
        assert!((g.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let l = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let ce = g.cross_entropy(l, &[0]).unwrap();
        let v = g.value(ce).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-300);

        assert!(matches!(
            g.cross_entropy(l, &[2]),
            Err(GtnError::Label {
                label: 2,
                n_classes: 2
            })
        ));
    }

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        let mut rng = Rng::new(5, Purpose::Init);
        let logits = random_tensor(&[4, 3], &mut rng);
        let labels = [2, 0, 1, 1];
        // Naive softmax then log, no max shift; safe for logits in [-1, 1].
        let naive: f64 = logits
            .rows()
            .zip(labels)
            .map(|(row, l)| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[l].exp() / z).ln()
            })
            .sum::<f64>()
            / 4.0;
        let mut g = Graph::new();
        let x = g.constant(logits);
        let ce = g.cross_entropy(x, &labels).unwrap();
        assert!((g.value(ce).data()[0] - naive).abs() < 1e-10);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

        // accumulates without reset
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());

        assert!(matches!(g.backward(xx), Err(GtnError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn grad_matmul_add_bias() {
        let mut rng = Rng::new(1, Purpose::Init);
        let inputs = [
            random_tensor(&[3, 4], &mut rng),
            random_tensor(&[4, 2], &mut rng),
            random_tensor(&[2], &mut rng),
        ];
        check_grads(&inputs, |g, v| g.linear(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn grad_elementwise() {
        let mut rng = Rng::new(2, Purpose::Init);
        let inputs = [
            random_tensor(&[2, 3], &mut rng),
            random_tensor(&[2, 3], &mut rng),
        ];
        check_grads(&inputs, |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let s = g.sub(a, v[1]).unwrap();
            let m = g.mul(s, v[1]).unwrap();
            let t = g.tanh(m);
            let r = g.relu(v[0]);
            let sc = g.scale(r, -1.7);
            g.add(t, sc).unwrap()
        });
    }

    #[test]
    fn grad_mul_scalar_and_const() {
        let mut rng = Rng::new(3, Purpose::Init);
        let inputs = [
            random_tensor(&[2, 3], &mut rng),
            random_tensor(&[1], &mut rng),
        ];
        let c = random_tensor(&[2, 3], &mut rng);
        check_grads(&inputs, move |g, v| {
            let m = g.mul_scalar(v[0], v[1]).unwrap();
            g.mul_const(m, &c).unwrap()
        });
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = Rng::new(4, Purpose::Init);
        let inputs = [
            random_tensor(&[2, 3, 4], &mut rng),
            random_tensor(&[2, 1, 4], &mut rng),
        ];
        check_grads(&inputs, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let p = g.transpose(c, &[2, 0, 1]).unwrap();
            let s = g.slice(p, 2, 1, 4).unwrap();
            g.reshape(s, &[4, 6]).unwrap()
        });
    }

    #[test]
    fn grad_softmax_masked() {
        let mut rng = Rng::new(5, Purpose::Init);
        let inputs = [random_tensor(&[3, 4], &mut rng)];
        let mask = Mask::new(
            vec![3, 4],
            vec![
                true, false, true, true, //
                false, false, true, false, //
                true, true, true, true,
            ],
        )
        .unwrap();
        check_grads(&inputs, move |g, v| {
            g.softmax(v[0], 1, Some(&mask)).unwrap()
        });
        check_grads(&inputs, |g, v| g.softmax(v[0], 0, None).unwrap());
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = Rng::new(6, Purpose::Init);
        let inputs = [
            random_tensor(&[3, 5], &mut rng),
            random_tensor(&[5], &mut rng),
            random_tensor(&[5], &mut rng),
        ];
        check_grads(&inputs, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let mut rng = Rng::new(7, Purpose::Init);
        let inputs = [random_tensor(&[4, 3], &mut rng)];
        check_grads(&inputs, |g, v| {
            g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
        });
    }

    #[test]
    fn grad_dropout_fixed_mask() {
        let mut rng = Rng::new(8, Purpose::Init);
        let inputs = [random_tensor(&[4, 4], &mut rng)];
        check_grads(&inputs, |g, v| {
            let mut drop_rng = Rng::new(11, Purpose::Dropout);
            g.dropout(v[0], 0.3, &mut drop_rng, true).unwrap()
        });
    }
}
