//! Reverse-mode gradient tape over the kernels in [`super::kernels`].
//!
//! Ops are appended in forward order and replayed in exact reverse order by
//! [`GradTape::backward`], which drains the tape.

use super::kernels::{self, conv_geom, gelu_grad_scalar, moments, pad_rows};
use super::tensor::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddRowBias(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(usize),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Transpose(usize),
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
    },
    TrimCols {
        src: usize,
        keep: usize,
    },
    MeanRows(usize),
    MaxRows {
        src: usize,
        argmax: Vec<usize>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        row_weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner tape recording a forward pass.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients extracted from a drained tape, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::add(self.value(a), self.value(b))?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(v, Op::Add(a.0, b.0), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::Shape {
                op: "mul",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Tensor::from_parts(x.shape().to_vec(), data);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(v, Op::Mul(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMul(a.0, b.0), ng))
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(v, Op::MatMulNT(a.0, b.0), ng))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = kernels::add_row_bias(self.value(a), self.value(bias))?;
        let ng = self.needs(&[a.0, bias.0]);
        Ok(self.push(v, Op::AddRowBias(a.0, bias.0), ng))
    }

    /// `x·Wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = kernels::gelu(self.value(a));
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Gelu(a.0), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = xv.rows_cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let (mean, inv) = moments(row, eps);
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(g.data()[j] * h + b.data()[j]);
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = kernels::softmax(self.value(a));
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Softmax(a.0), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (m, n) = src.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid(format!("column slice {start}+{len} of {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.data()[i * n + start..i * n + start + len]);
        }
        let v = Tensor::from_parts(vec![m, len], out);
        let ng = self.needs(&[a.0]);
        Ok(self.push(v, Op::SliceCols { src: a.0, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let (m, _) = mats
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?
            .dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(mats.len());
        for t in &mats {
            let (r, c) = t.dims2("concat_cols")?;
            if r != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: mats[0].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (t, &w) in mats.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::from_parts(vec![m, total], out);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&idx);
        Ok(self.push(v, Op::ConcatCols(idx), ng))
    }

    /// Stacks matrices (or vectors as single rows) with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let (_, n) = self.value(*first).rows_cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rows_cols().1 != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            out.extend_from_slice(t.data());
        }
        let m = out.len() / n;
        let v = Tensor::from_parts(vec![m, n], out);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&idx);
        Ok(self.push(v, Op::ConcatRows(idx), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(a))?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(v, Op::Transpose(a.0), ng))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let v = kernels::conv1d_ext(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            groups,
            pad_left,
            pad_right,
        )?;
        let mut idx = vec![x.0, w.0];
        idx.extend(bias.map(|b| b.0));
        let ng = self.needs(&idx);
        Ok(self.push(
            v,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                groups,
                pad_left,
                pad_right,
            },
            ng,
        ))
    }

    /// Keeps the first `keep` columns of a matrix.
    pub fn trim_cols(&mut self, a: Var, keep: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("trim_cols")?;
        if keep == 0 || keep > n {
            return Err(TensorError::Invalid(format!("trim to {keep} of {n} columns")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * keep);
        for i in 0..m {
            out.extend_from_slice(&src[i * n..i * n + keep]);
        }
        let v = Tensor::from_parts(vec![m, keep], out);
        let ng = self.needs(&[a.0]);
        Ok(self.push(v, Op::TrimCols { src: a.0, keep }, ng))
    }

    /// Column means of an `m×n` matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("mean_rows")?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::from_parts(vec![1, n], out);
        let ng = self.needs(&[a.0]);
        Ok(self.push(v, Op::MeanRows(a.0), ng))
    }

    /// Column maxima of an `m×n` matrix; ties route gradient to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("max_rows")?;
        let d = self.value(a).data();
        let mut argmax = vec![0usize; n];
        let mut out = d[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                if d[i * n + j] > out[j] {
                    out[j] = d[i * n + j];
                    argmax[j] = i;
                }
            }
        }
        let v = Tensor::from_parts(vec![1, n], out);
        let ng = self.needs(&[a.0]);
        Ok(self.push(v, Op::MaxRows { src: a.0, argmax }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a.0]);
        self.push(v, Op::Sum(a.0), ng)
    }

    /// Weighted mean softmax cross-entropy of `logits: m×C` against `labels`.
    /// `class_weights` scales each row by the weight of its label and the
    /// total is divided by the summed row weights.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = lv.dims2("cross_entropy")?;
        if labels.len() != m {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: vec![m, c],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Invalid(format!("label {bad} outside {c} classes")));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(TensorError::Invalid(format!(
                    "{} class weights for {c} classes",
                    w.len()
                )));
            }
        }
        let row_weights: Vec<T> = labels
            .iter()
            .map(|&y| class_weights.map_or(T::one(), |w| w[y]))
            .collect();
        let mut probs = Vec::with_capacity(m * c);
        let mut total = T::zero();
        let mut wsum = T::zero();
        for (i, row) in lv.data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &v in row {
                z += (v - max).exp();
            }
            let lse = max + z.ln();
            total += row_weights[i] * (lse - row[labels[i]]);
            wsum += row_weights[i];
            for &v in row {
                probs.push((v - lse).exp());
            }
        }
        let v = Tensor::scalar(total / wsum);
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                row_weights,
                probs,
            },
            ng,
        ))
    }

    /// Backpropagates from a single-element `loss`, draining the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    idx: usize,
    g: Tensor<T>,
) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn wants<T>(nodes: &[Node<T>], idx: usize) -> bool {
    nodes[idx].needs_grad
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    idx: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            if wants(nodes, *b) {
                let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, g.map(|x| x * c));
        }
        Op::MatMul(a, b) => {
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, kernels::matmul_nt(g, val(*b))?);
            }
            if wants(nodes, *b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(val(*a), g)?);
            }
        }
        Op::MatMulNT(a, b) => {
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, kernels::matmul(g, val(*b))?);
            }
            if wants(nodes, *b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(g, val(*a))?);
            }
        }
        Op::AddRowBias(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if wants(nodes, *b) {
                let (_, n) = g.rows_cols();
                let mut db = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                let shape = val(*b).shape().to_vec();
                accumulate(nodes, grads, *b, Tensor::from_parts(shape, db));
            }
        }
        Op::Gelu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(&gy, &x)| gy * gelu_grad_scalar(x))
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (_, d) = g.rows_cols();
            let gv = val(*gain).data();
            if wants(nodes, *x) {
                let dn = T::of(d as f64);
                let mut dx = Vec::with_capacity(g.len());
                for (r, grow) in g.data().chunks(d).enumerate() {
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hrow[j];
                    }
                    let k = inv_std[r] / dn;
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        dx.push(k * (dn * dh - s1 - hrow[j] * s2));
                    }
                }
                accumulate(nodes, grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            if wants(nodes, *gain) || wants(nodes, *bias) {
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (r, grow) in g.data().chunks(d).enumerate() {
                    for j in 0..d {
                        dg[j] += grow[j] * xhat[r * d + j];
                        db[j] += grow[j];
                    }
                }
                let gs = val(*gain).shape().to_vec();
                let bs = val(*bias).shape().to_vec();
                accumulate(nodes, grads, *gain, Tensor::from_parts(gs, dg));
                accumulate(nodes, grads, *bias, Tensor::from_parts(bs, db));
            }
        }
        Op::Softmax(a) => {
            let y = &nodes[idx].value;
            let (_, d) = y.rows_cols();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                let mut dot = T::zero();
                for (&p, &q) in yr.iter().zip(gr) {
                    dot += p * q;
                }
                dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(y.shape().to_vec(), dx));
        }
        Op::SliceCols { src, start } => {
            let (m, n) = val(*src).dims2("slice_cols")?;
            let (_, len) = g.dims2("slice_cols")?;
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                d[i * n + start..i * n + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            accumulate(nodes, grads, *src, Tensor::from_parts(vec![m, n], d));
        }
        Op::ConcatCols(parts) => {
            let (m, total) = g.dims2("concat_cols")?;
            let mut off = 0;
            for &p in parts {
                let (_, w) = val(p).dims2("concat_cols")?;
                if wants(nodes, p) {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_parts(vec![m, w], d));
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if wants(nodes, p) {
                    let shape = val(p).shape().to_vec();
                    accumulate(nodes, grads, p, Tensor::from_parts(shape, g.data()[off..off + n].to_vec()));
                }
                off += n;
            }
        }
        Op::Transpose(a) => {
            accumulate(nodes, grads, *a, kernels::transpose(g)?);
        }
        Op::Conv1d {
            x,
            w,
            bias,
            stride,
            groups,
            pad_left,
            pad_right,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let geo = conv_geom(xv, wv, *stride, *groups, *pad_left, *pad_right)?;
            let xp = pad_rows(xv.data(), geo.c_in, geo.len, *pad_left, *pad_right);
            let gd = g.data();
            let want_x = wants(nodes, *x);
            let want_w = wants(nodes, *w);
            let mut dxp = vec![T::zero(); if want_x { xp.len() } else { 0 }];
            let mut dw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
            let wd = wv.data();
            for o in 0..geo.c_out {
                let group = o / geo.out_per_group;
                for t in 0..geo.out_len {
                    let gy = gd[o * geo.out_len + t];
                    let start = t * geo.stride;
                    for ci in 0..geo.c_per_group {
                        let c = group * geo.c_per_group + ci;
                        let xo = c * geo.padded_len + start;
                        let wo = (o * geo.c_per_group + ci) * geo.k;
                        for kk in 0..geo.k {
                            if want_w {
                                dw[wo + kk] += gy * xp[xo + kk];
                            }
                            if want_x {
                                dxp[xo + kk] += gy * wd[wo + kk];
                            }
                        }
                    }
                }
            }
            if want_x {
                let mut dx = Vec::with_capacity(xv.len());
                for c in 0..geo.c_in {
                    let row = c * geo.padded_len + geo.pad_left;
                    dx.extend_from_slice(&dxp[row..row + geo.len]);
                }
                accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            if want_w {
                accumulate(nodes, grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
            }
            if let Some(b) = bias {
                if wants(nodes, *b) {
                    let db = gd.chunks(geo.out_len).map(|r| r.iter().copied().sum()).collect();
                    accumulate(nodes, grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                }
            }
        }
        Op::TrimCols { src, keep } => {
            let (m, n) = val(*src).dims2("trim_cols")?;
            let mut d = vec![T::zero(); m * n];
            for i in 0..m {
                d[i * n..i * n + keep].copy_from_slice(&g.data()[i * keep..(i + 1) * keep]);
            }
            accumulate(nodes, grads, *src, Tensor::from_parts(vec![m, n], d));
        }
        Op::MeanRows(a) => {
            let (m, n) = val(*a).dims2("mean_rows")?;
            let inv = T::one() / T::of(m as f64);
            let row: Vec<T> = g.data().iter().map(|&x| x * inv).collect();
            let d = (0..m).flat_map(|_| row.iter().copied()).collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(vec![m, n], d));
        }
        Op::MaxRows { src, argmax } => {
            let (m, n) = val(*src).dims2("max_rows")?;
            let mut d = vec![T::zero(); m * n];
            for (j, &i) in argmax.iter().enumerate() {
                d[i * n + j] = g.data()[j];
            }
            accumulate(nodes, grads, *src, Tensor::from_parts(vec![m, n], d));
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), s));
        }
        Op::CrossEntropy {
            logits,
            labels,
            row_weights,
            probs,
        } => {
            let (m, c) = val(*logits).dims2("cross_entropy")?;
            let mut wsum = T::zero();
            for &w in row_weights {
                wsum += w;
            }
            let scale = g.data()[0] / wsum;
            let mut d = probs.clone();
            for i in 0..m {
                let w = row_weights[i] * scale;
                for j in 0..c {
                    d[i * c + j] *= w;
                }
                d[i * c + labels[i]] -= w;
            }
            accumulate(nodes, grads, *logits, Tensor::from_parts(vec![m, c], d));
        }
    }
    Ok(())
}
