//! Dense row-major tensor with an optional gradient slot.
//!
//! Two element types are supported: `f32` for training and `f64` for
//! gradient checking, selected through the [`Element`] trait.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense multi-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    dims: Vec<usize>,
    data: Vec<E>,
    /// Accumulated gradient, same dims as `data` when present.
    pub grad: Option<Vec<E>>,
    pub requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("zero-sized dimension in {dims:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: dims.clone(),
                rhs: vec![data.len()],
                detail: format!("dims require {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { dims, data, grad: None, requires_grad: false })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![E::ZERO; numel], grad: None, requires_grad: false }
    }

    pub fn full(dims: &[usize], value: E) -> Self {
        let numel = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { dims: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Symmetric uniform fill in [-bound, bound]; draws in f64 so f32 and
    /// f64 instantiations from the same seed agree.
    pub fn uniform(dims: &[usize], bound: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(dims, |_| E::from_f64(rng.uniform(-bound, bound)))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<E>) {
        (self.dims, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless-enough precision switch: f32 -> f64 widening is exact, which
    /// is what the gradient-checking path relies on.
    pub fn convert<F: Element>(&self) -> Tensor<F> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Ensures a gradient buffer exists and returns it.
    pub fn grad_mut(&mut self) -> &mut [E] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![E::ZERO; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = E::ZERO);
        }
    }
}

/// Row-major strides for `dims`.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes. Each aligned dimension must be
/// equal or 1 (missing leading dimensions count as 1).
pub fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
                detail: format!("dimension {i}: {da} vs {db} not broadcastable"),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of operand `dims` viewed through broadcast shape `out_dims`
/// (stride 0 on broadcast axes).
pub fn broadcast_strides(dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let own = strides(dims);
    let rank = out_dims.len();
    let mut s = vec![0usize; rank];
    for i in 0..rank {
        if i + dims.len() >= rank {
            let j = i + dims.len() - rank;
            s[i] = if dims[j] == 1 && out_dims[i] != 1 { 0 } else { own[j] };
        }
    }
    s
}

/// Iterates a multi-index over `dims`, yielding flat offsets for two
/// broadcast operands alongside the output offset.
pub fn for_each_broadcast(
    out_dims: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_dims.iter().product();
    let mut idx = vec![0usize; out_dims.len()];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for flat in 0..numel {
        f(flat, oa, ob);
        for ax in (0..out_dims.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            oa -= sa[ax] * out_dims[ax];
            ob -= sb[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
}
