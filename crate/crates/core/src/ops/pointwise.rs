//! Element-wise activations and binary ops with one-sided broadcasting.
//!
//! For `add` and `mul` the right operand broadcasts into the left: shapes
//! are right-aligned and every right extent must equal the left extent or be 1.
//! The right operand may have lower rank (missing leading axes act as 1).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Add,
    Mul,
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let mut g = grad_out.clone();
    for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
        if v <= S::zero() {
            *d = S::zero();
        }
    }
    g
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(sigmoid_scalar)
}

/// Takes the forward *output* `y = sigmoid(x)`.
pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let mut g = grad_out.clone();
    for (d, &s) in g.data_mut().iter_mut().zip(y.data()) {
        *d = *d * s * (S::one() - s);
    }
    g
}

/// Maps every flat index of the left operand to the flat index of the
/// broadcast right operand.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    same: bool,
    shape: Vec<usize>,
    strides: Vec<usize>,
}

impl Broadcast {
    pub(crate) fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                same: true,
                shape: a.to_vec(),
                strides: Vec::new(),
            });
        }
        if b.len() > a.len() {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {b:?} into lower-rank {a:?}"),
            ));
        }
        let lead = a.len() - b.len();
        let mut strides = vec![0; a.len()];
        let mut stride = 1;
        for axis in (0..a.len()).rev() {
            let be = if axis >= lead { b[axis - lead] } else { 1 };
            if be == a[axis] {
                strides[axis] = if be == 1 { 0 } else { stride };
            } else if be == 1 {
                strides[axis] = 0;
            } else {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {b:?} into {a:?} (axis {axis}: {be} vs {})", a[axis]),
                ));
            }
            stride *= be;
        }
        Ok(Self {
            same: false,
            shape: a.to_vec(),
            strides,
        })
    }

    /// Calls `f(a_index, b_index)` for every element of the left operand.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.shape.iter().product();
        if self.same {
            (0..n).for_each(|i| f(i, i));
            return;
        }
        let rank = self.shape.len();
        let mut idx = vec![0usize; rank];
        let mut boff = 0usize;
        for i in 0..n {
            f(i, boff);
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                boff += self.strides[axis];
                if idx[axis] < self.shape[axis] {
                    break;
                }
                boff -= self.strides[axis] * idx[axis];
                idx[axis] = 0;
            }
        }
    }
}

fn binary<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let bc = Broadcast::new(op, a.shape(), b.shape())?;
    let mut out = a.clone();
    let (od, bd) = (out.data_mut(), b.data());
    bc.for_each(|i, j| od[i] = f(od[i], bd[j]));
    Ok(out)
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    binary("mul", a, b, |x, y| x * y)
}

/// Sums `grad` (shaped like the left operand) down to the right operand's shape.
pub(crate) fn reduce_to<S: Scalar>(bc: &Broadcast, grad: &[S], b_len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); b_len];
    bc.for_each(|i, j| out[j] = out[j] + grad[i]);
    out
}

/// Returns `(grad_a, grad_b)`.
pub fn add_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let bc = Broadcast::new("add", a.shape(), b.shape())?;
    let gb = reduce_to(&bc, grad_out.data(), b.numel());
    Ok((grad_out.clone(), Tensor::new(b.shape().to_vec(), gb)?))
}

pub fn mul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let bc = Broadcast::new("mul", a.shape(), b.shape())?;
    let mut ga = grad_out.clone();
    let mut gb = vec![S::zero(); b.numel()];
    {
        let (gad, god, ad, bd) = (ga.data_mut(), grad_out.data(), a.data(), b.data());
        bc.for_each(|i, j| {
            gad[i] = god[i] * bd[j];
            gb[j] = gb[j] + god[i] * ad[i];
        });
    }
    Ok((ga, Tensor::new(b.shape().to_vec(), gb)?))
}

/// Dispatches the suite by kind; `other` is required for `Add` and `Mul`.
pub fn pointwise<S: Scalar>(kind: Pointwise, x: &Tensor<S>, other: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let need = || Error::Invalid(format!("{kind:?} needs a second operand"));
    match kind {
        Pointwise::Relu => Ok(relu(x)),
        Pointwise::Sigmoid => Ok(sigmoid(x)),
        Pointwise::Add => add(x, other.ok_or_else(need)?),
        Pointwise::Mul => mul(x, other.ok_or_else(need)?),
    }
}
