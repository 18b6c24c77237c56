//! Dense row-major tensors and the pure kernels behind every tape operation.
//!
//! All kernels iterate in a fixed order, so identical inputs always produce
//! bit-identical outputs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f64` is used for gradient checks and
/// oracles, `f32` everywhere else.
pub trait Real:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const NORM_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from f64 values, converting to the element type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(Real::to_f64(x))).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a vector of length `shape[last]` to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let last = *self.shape.last().unwrap_or(&1);
        if bias.numel() != last || bias.rank() != 1 {
            return Err(Error::shape("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(last) {
            for (x, &b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// 2-D matrix product, or a batched product of two rank-3 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let err = || Error::shape("matmul", &self.shape, &other.shape);
        match (self.shape.as_slice(), other.shape.as_slice()) {
            (&[n, k], &[k2, m]) if k == k2 => {
                let mut out = vec![T::zero(); n * m];
                gemm_nn(&self.data, &other.data, &mut out, n, k, m);
                Self::new(vec![n, m], out)
            }
            (&[b, n, k], &[b2, k2, m]) if b == b2 && k == k2 => {
                let mut out = vec![T::zero(); b * n * m];
                for i in 0..b {
                    gemm_nn(
                        &self.data[i * n * k..(i + 1) * n * k],
                        &other.data[i * k * m..(i + 1) * k * m],
                        &mut out[i * n * m..(i + 1) * n * m],
                        n,
                        k,
                        m,
                    );
                }
                Self::new(vec![b, n, m], out)
            }
            _ => Err(err()),
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &self.shape, perm));
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < new_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::new(new_shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", &first.shape, &[axis]));
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
            shape[axis] += p.shape[axis];
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Self::new(shape, out)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape("slice", &self.shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(shape, out)
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = *self.shape.first().unwrap_or(&0);
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", &self.shape, &[indices.len()]));
        }
        let width = self.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, out)
    }

    pub fn sum(&self) -> Self {
        Self::scalar(self.data.iter().copied().sum())
    }

    pub fn mean(&self) -> Self {
        Self::scalar(self.data.iter().copied().sum::<T>() / T::of(self.numel() as f64))
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape("mean_axis", &self.shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let inv = T::of(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &self.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape("softmax", &self.shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..n {
                    max = max.max(out[at(i)]);
                }
                let mut total = T::zero();
                for i in 0..n {
                    let e = (out[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] = out[at(i)] / total;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Self, bias: &Self) -> Result<Self> {
        let width = *self.shape.last().unwrap_or(&1);
        if gain.numel() != width || bias.numel() != width {
            return Err(Error::shape("layer_norm", &self.shape, &gain.shape));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(width) {
            let (mean, rstd) = row_stats(row);
            for ((x, &g), &b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
                *x = (*x - mean) * rstd * g + b;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Self {
        self.map(|x| {
            let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
            T::of(0.5) * x * (T::one() + inner.tanh())
        })
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&self) -> Self {
        let width = *self.shape.last().unwrap_or(&1);
        let mut out = self.data.clone();
        for row in out.chunks_mut(width) {
            let norm = row_norm(row);
            for x in row.iter_mut() {
                *x = *x / norm;
            }
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    pub fn exp(&self) -> Self {
        self.map(|x| x.exp())
    }

    pub fn ln(&self) -> Self {
        self.map(|x| x.ln())
    }

    /// Elementwise `max(x, c)`; `relu` is the `c = 0` case.
    pub fn max_const(&self, c: T) -> Self {
        self.map(|x| if x > c { x } else { c })
    }

    pub fn relu(&self) -> Self {
        self.max_const(T::zero())
    }

    /// Mean squared error against `other`.
    pub fn mse(&self, other: &Self) -> Result<Self> {
        let diff = self.sub(other).map_err(|_| Error::shape("mse", &self.shape, &other.shape))?;
        let total: T = diff.data.iter().map(|&d| d * d).sum();
        Ok(Self::scalar(total / T::of(self.numel() as f64)))
    }
}

pub(crate) fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, (var + T::of(LN_EPS)).sqrt().recip())
}

pub(crate) fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter()
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt()
        .max(T::of(NORM_EPS))
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    T::of(0.5) * (T::one() + t)
        + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out[n×m] += a[k×n]ᵀ · b[k×m]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let br = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == T::zero() {
                continue;
            }
            for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(br) {
                *o += api * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);
    }

    #[test]
    fn matmul_one_by_one() {
        let out = t(&[1, 1], &[2.]).matmul(&t(&[1, 1], &[3.])).unwrap();
        assert_eq!(out.data(), &[6.]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[0., 1., 1., 0.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = t(&[2, 3], &[0.; 6]).matmul(&t(&[2, 2], &[0.; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2, 1], &[5., 6., 7., 8.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17., 53.]);
    }

    #[test]
    fn softmax_uniform_and_derived() {
        let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[0., 3f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 0.5, 0.5, 9.0]);
        let shifted = x.map(|v| v + 123.0);
        let a = x.softmax(1).unwrap();
        let b = shifted.softmax(1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_on_inner_axis() {
        let x = t(&[2, 2], &[0., 0., 3f64.ln(), 0.]);
        let s = x.softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[2] - 0.75).abs() < 1e-12);
        assert!((s.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), x);
    }

    #[test]
    fn concat_slice_inverse() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[9., 8.]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
        assert_eq!(c.slice(1, 0, 2).unwrap(), a);
        assert_eq!(c.slice(1, 2, 1).unwrap(), b);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = t(&[2, 4], &[1., 2., 3., 4., -1., 0., 5., 2.]);
        let y = x.layer_norm(&Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn mse_direct_evaluation() {
        let l = t(&[2], &[0., 1.]).mse(&t(&[2], &[1., 1.])).unwrap();
        assert_eq!(l.item(), 0.5);
    }

    #[test]
    fn l2_rows_unit() {
        let y = t(&[2, 2], &[3., 4., 0., 2.]).l2_normalize();
        assert_eq!(y.data(), &[0.6, 0.8, 0.0, 1.0]);
    }
}
