//! Append-only reverse-mode autodiff tape.
//!
//! Every operation evaluates eagerly through the pure kernels in
//! [`crate::tensor`] and records its parents. Node ids are insertion
//! indices, so parents always precede children and the reverse sweep in
//! [`Tape::backward`] is a plain reverse iteration.

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad, gemm_nt, gemm_tn, row_norm, row_stats, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    LayerNorm(Var, Var, Var),
    Gelu(Var),
    L2Normalize(Var),
    Mse(Var, Var),
    Exp(Var),
    Log(Var),
    MaxConst(Var, f64),
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn forward<'a, T: Real>(op: &Op, get: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => get(*a).add(get(*b))?,
        Op::Sub(a, b) => get(*a).sub(get(*b))?,
        Op::Mul(a, b) => get(*a).mul(get(*b))?,
        Op::Scale(a, c) => get(*a).scale(T::of(*c)),
        Op::AddRow(a, b) => get(*a).add_row(get(*b))?,
        Op::MatMul(a, b) => get(*a).matmul(get(*b))?,
        Op::Permute(a, perm) => get(*a).permute(perm)?,
        Op::Reshape(a, shape) => get(*a).reshape(shape)?,
        Op::Concat(parts, axis) => {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| get(p)).collect();
            Tensor::concat(&vals, *axis)?
        }
        Op::Slice {
            src,
            axis,
            start,
            len,
        } => get(*src).slice(*axis, *start, *len)?,
        Op::Gather(a, idx) => get(*a).gather_rows(idx)?,
        Op::Sum(a) => get(*a).sum(),
        Op::Mean(a) => get(*a).mean(),
        Op::MeanAxis(a, axis) => get(*a).mean_axis(*axis)?,
        Op::Softmax(a, axis) => get(*a).softmax(*axis)?,
        Op::LayerNorm(x, g, b) => get(*x).layer_norm(get(*g), get(*b))?,
        Op::Gelu(a) => get(*a).gelu(),
        Op::L2Normalize(a) => get(*a).l2_normalize(),
        Op::Mse(a, b) => get(*a).mse(get(*b))?,
        Op::Exp(a) => get(*a).exp(),
        Op::Log(a) => get(*a).ln(),
        Op::MaxConst(a, c) => get(*a).max_const(T::of(*c)),
    })
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
            vec![*a, *b]
        }
        Op::LayerNorm(a, b, c) => vec![*a, *b, *c],
        Op::Concat(parts, _) => parts.clone(),
        Op::Scale(a, _)
        | Op::Permute(a, _)
        | Op::Reshape(a, _)
        | Op::Gather(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanAxis(a, _)
        | Op::Softmax(a, _)
        | Op::Gelu(a)
        | Op::L2Normalize(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::MaxConst(a, _) => vec![*a],
        Op::Slice { src, .. } => vec![*src],
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = forward(&op, |v| &self.nodes[v.0].value)?;
        let needs_grad = parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.record(Op::Permute(a, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice {
            src,
            axis,
            start,
            len,
        })
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.record(Op::Gather(a, indices.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::MeanAxis(a, axis))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.record(Op::Softmax(a, axis))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.record(Op::LayerNorm(x, gain, bias))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.record(Op::L2Normalize(a))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mse(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::MaxConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.max_const(a, 0.0)
    }

    /// `x · w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    /// Recomputes every non-leaf node from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => forward(op, |p| &vals[p.0])?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Reverse sweep from a one-element output node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_node = grads;
        by_node.resize(self.nodes.len(), None);
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && by_node[i].is_none() {
                by_node[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_node })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(val(*b)).expect("shape checked"));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(val(*a)).expect("shape checked"));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(T::of(*c))),
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let width = val(*b).numel();
                    let mut db = vec![T::zero(); width];
                    for row in g.data().chunks(width) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(val(*b).shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, n, k, m) = match (av.shape(), bv.shape()) {
                    (&[n, k], &[_, m]) => (1, n, k, m),
                    (&[bt, n, k], &[_, _, m]) => (bt, n, k, m),
                    _ => unreachable!("validated in forward"),
                };
                if self.wants(*a) {
                    let mut da = vec![T::zero(); av.numel()];
                    for i in 0..batch {
                        gemm_nt(
                            &g.data()[i * n * m..(i + 1) * n * m],
                            &bv.data()[i * k * m..(i + 1) * k * m],
                            &mut da[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.numel()];
                    for i in 0..batch {
                        gemm_tn(
                            &av.data()[i * n * k..(i + 1) * n * k],
                            &g.data()[i * n * m..(i + 1) * n * m],
                            &mut db[i * k * m..(i + 1) * k * m],
                            k,
                            n,
                            m,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *a, g.permute(&inverse).unwrap());
            }
            Op::Reshape(a, _) => self.accumulate(grads, *a, g.reshape(val(*a).shape()).unwrap()),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice(*axis, start, len).unwrap());
                    }
                    start += len;
                }
            }
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => {
                let shape = val(*src).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = shape[*axis];
                let mut d = Tensor::zeros(shape);
                let dd = d.data_mut();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src_off = o * len * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[src_off..src_off + len * inner]);
                }
                self.accumulate(grads, *src, d);
            }
            Op::Gather(a, idx) => {
                let shape = val(*a).shape();
                let width = val(*a).numel() / shape[0];
                let mut d = Tensor::zeros(shape);
                let dd = d.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (x, &gv) in dd[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g.data()[r * width..(r + 1) * width])
                    {
                        *x += gv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = T::of(val(*a).numel() as f64);
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n))
            }
            Op::MeanAxis(a, axis) => {
                let shape = val(*a).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = shape[*axis];
                let inv = T::of(1.0 / n as f64);
                let mut d = Tensor::zeros(shape);
                let dd = d.data_mut();
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            dd[(o * n + i) * inner + j] = g.data()[o * inner + j] * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a, axis) => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let n = shape[*axis];
                let mut d = Tensor::zeros(shape);
                let (yd, gd) = (y.data(), g.data());
                let dd = d.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let mut dot = T::zero();
                        for i in 0..n {
                            dot += gd[at(i)] * yd[at(i)];
                        }
                        for i in 0..n {
                            dd[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm(x, gain, bias) => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let width = gv.len();
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgain = vec![T::zero(); width];
                let mut dbias = vec![T::zero(); width];
                let inv_n = T::of(1.0 / width as f64);
                for ((row, grow), dxrow) in xv
                    .data()
                    .chunks(width)
                    .zip(g.data().chunks(width))
                    .zip(dx.chunks_mut(width))
                {
                    let (mean, rstd) = row_stats(row);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..width {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = grow[c] * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[c] += grow[c] * xhat;
                        dbias[c] += grow[c];
                    }
                    for c in 0..width {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = grow[c] * gv[c];
                        dxrow[c] = rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                self.accumulate(grads, *gain, Tensor::new(val(*gain).shape().to_vec(), dgain).unwrap());
                self.accumulate(grads, *bias, Tensor::new(val(*bias).shape().to_vec(), dbias).unwrap());
            }
            Op::Gelu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::L2Normalize(a) => {
                let xv = val(*a);
                let width = *xv.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); xv.numel()];
                for (((xr, yr), gr), dr) in xv
                    .data()
                    .chunks(width)
                    .zip(y.data().chunks(width))
                    .zip(g.data().chunks(width))
                    .zip(d.chunks_mut(width))
                {
                    let norm = row_norm(xr);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..width {
                        dr[c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Mse(a, b) => {
                let diff = val(*a).sub(val(*b)).unwrap();
                let c = T::of(2.0) * g.item() / T::of(diff.numel() as f64);
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.scale(-c));
                }
                self.accumulate(grads, *a, diff.scale(c));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(y).unwrap()),
            Op::Log(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::MaxConst(a, c) => {
                let c = T::of(*c);
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > c { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
        }
    }
}

/// Gradients of one scalar output with respect to every node that needs one.
/// Every trainable leaf has an entry; unreachable leaves hold zeros.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[x]).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(scalar(3.0));
        let z = tape.leaf(scalar(2.0));
        let y = tape.scale(z, 4.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.0);
        assert_eq!(g.get(z).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(scalar(1.5));
        let c = tape.constant(scalar(2.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64(vec![2, 3], &[0.1, -0.4, 2.0, 1.0, 0.3, -1.2]).unwrap());
        let b = tape.leaf(Tensor::from_f64(vec![3, 2], &[0.5, 0.2, -0.3, 0.9, 1.1, 0.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let gl = tape.gelu(s).unwrap();
        let _ = tape.sum(gl).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
    }
}
