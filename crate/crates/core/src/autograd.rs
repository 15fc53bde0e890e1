//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends its output value and the inputs its backward rule needs.
//! [`Tape::backward`] walks the records in exact reverse order and
//! returns a gradient for every variable, zero where nothing flowed.

use crate::error::{Error, Result};
use crate::ops::batchnorm::{bn_infer_backward, bn_infer_forward, bn_train_backward, bn_train_forward, BnCache};
use crate::ops::conv::{
    bias_grad_raw, conv2d_forward_raw, conv2d_input_grad_raw, conv2d_kernel_grad_raw, output_shape,
    tfc2d_backward_raw, ConvGeometry,
};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::pointwise::{reduce_to, sigmoid_scalar, Broadcast};
use crate::ops::pool::{global_pool, global_pool_backward, PoolKind};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        scale: Option<Var>,
        geom: ConvGeometry,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<S>,
    },
    BnInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<S>,
        var: Tensor<S>,
        eps: f64,
    },
    Reshape {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { scale: None, .. } => "conv2d",
            Op::Conv { .. } => "tfc2d",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Pool { .. } => "pool",
            Op::Linear { .. } => "linear",
            Op::BnTrain { .. } => "batchnorm_train",
            Op::BnInfer { .. } => "batchnorm_infer",
            Op::Reshape { .. } => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

/// Single-owner record of one forward pass.
pub struct Tape<S = f32> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    branch_sig: u64,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(5)
}

/// Gradients returned by [`Tape::backward`], one per recorded variable.
pub struct Grads<S> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> &Tensor<S> {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        let shape = self.grads[v.0].shape().to_vec();
        std::mem::replace(&mut self.grads[v.0], Tensor::zeros(shape).expect("valid shape"))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            branch_sig: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.ops.iter().map(Op::name).collect()
    }

    /// Digest of every data-dependent branch taken (ReLU masks, max-pool
    /// winners). Two evaluations with equal signatures went through the same
    /// piecewise-smooth region.
    pub fn branch_signature(&self) -> u64 {
        self.branch_sig
    }

    /// Batch statistics of a train-mode batch-norm output.
    pub fn bn_cache(&self, v: Var) -> Option<&BnCache<S>> {
        match &self.ops[v.0] {
            Op::BnTrain { cache, .. } => Some(cache),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl("conv2d", x, w, b, None, stride, pad)
    }

    /// Temporal focus convolution with per-sample channel weights `(n, c_in)`.
    pub fn tfc2d(&mut self, x: Var, w: Var, b: Option<Var>, weights: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl("tfc2d", x, w, b, Some(weights), stride, pad)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        scale: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let geom = ConvGeometry::new(op, &xs, self.value(w).shape(), stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::shape(op, "bias length differs from c_out"));
            }
        }
        if let Some(s) = scale {
            if self.value(s).shape() != [geom.n, geom.c_in] {
                return Err(Error::shape(
                    op,
                    format!(
                        "channel weights {:?} must be (n, c_in) = ({}, {})",
                        self.value(s).shape(),
                        geom.n,
                        geom.c_in
                    ),
                ));
            }
        }
        let out = conv2d_forward_raw(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            scale.map(|s| self.value(s).data()),
        );
        let t = Tensor::new(output_shape(&xs, &geom), out)?;
        Ok(self.push(t, Op::Conv { x, w, b, scale, geom }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new("add", self.value(a).shape(), self.value(b).shape())?;
        let mut out = self.value(a).clone();
        {
            let bd = self.values[b.0].data();
            let od = out.data_mut();
            bc.for_each(|i, j| od[i] = od[i] + bd[j]);
        }
        Ok(self.push(out, Op::Add { a, b, bc }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new("mul", self.value(a).shape(), self.value(b).shape())?;
        let mut out = self.value(a).clone();
        {
            let bd = self.values[b.0].data();
            let od = out.data_mut();
            bc.for_each(|i, j| od[i] = od[i] * bd[j]);
        }
        Ok(self.push(out, Op::Mul { a, b, bc }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut sig = self.branch_sig;
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        for (i, &v) in self.value(x).data().iter().enumerate() {
            if v > S::zero() {
                sig = mix(sig, i as u64);
            }
        }
        self.branch_sig = mix(sig, self.values.len() as u64);
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid { x })
    }

    /// `(n,c,h,w) -> (n,c)` or `(c,h,w) -> (c)`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let pooled = global_pool(self.value(x), kind)?;
        let mut sig = self.branch_sig;
        for &a in &pooled.argmax {
            sig = mix(sig, a as u64);
        }
        self.branch_sig = sig;
        Ok(self.push(
            pooled.output,
            Op::Pool {
                x,
                kind,
                argmax: pooled.argmax,
            },
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = bn_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::BnTrain { x, gamma, beta, cache }))
    }

    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        eps: f64,
    ) -> Result<Var> {
        let out = bn_infer_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            out,
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean: running_mean.clone(),
                var: running_var.clone(),
                eps,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Mean softmax cross-entropy of `(n, classes)` logits; returns a `(1)` scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.value(logits).shape() {
            [n, c] => (n, c),
            [c] => (1, c),
            ref s => return Err(Error::shape("cross_entropy", format!("logits must be (n, classes), got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![S::zero(); n * c];
        let mut loss = S::zero();
        for (s, &label) in labels.iter().enumerate() {
            let row = &z[s * c..][..c];
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let sum: S = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for k in 0..c {
                probs[s * c + k] = (row[k] - lse).exp();
            }
            loss = loss + (lse - row[label]);
        }
        let loss = loss / S::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `sum(x ⊙ weights)` as a `(1)` scalar; weights are a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<S>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", "weights must match the input shape"));
        }
        let s: S = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Differentiates the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a single element"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec())?);

        fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Conv { x, w, b, scale, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    match scale {
                        None => {
                            let gin = conv2d_input_grad_raw(geom, wv.data(), gout.data());
                            let gk = conv2d_kernel_grad_raw(geom, xv.data(), None, gout.data());
                            acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gin)?);
                            acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), gk)?);
                        }
                        Some(s) => {
                            let sv = self.value(*s);
                            let raw = tfc2d_backward_raw(geom, xv.data(), wv.data(), sv.data(), gout.data());
                            acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), raw.input)?);
                            acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), raw.kernel)?);
                            acc(&mut grads, *s, Tensor::new(sv.shape().to_vec(), raw.scale)?);
                        }
                    }
                    if let Some(b) = b {
                        acc(&mut grads, *b, Tensor::new(vec![geom.c_out], bias_grad_raw(geom, gout.data()))?);
                    }
                }
                Op::Add { a, b, bc } => {
                    let bv = self.value(*b);
                    let gb = reduce_to(bc, gout.data(), bv.numel());
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                    acc(&mut grads, *a, gout);
                }
                Op::Mul { a, b, bc } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = gout.clone();
                    let mut gb = vec![S::zero(); bv.numel()];
                    {
                        let (gad, god, ad, bd) = (ga.data_mut(), gout.data(), av.data(), bv.data());
                        bc.for_each(|i, j| {
                            gad[i] = god[i] * bd[j];
                            gb[j] = gb[j] + god[i] * ad[i];
                        });
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::Relu { x } => {
                    let mut g = gout;
                    for (d, &v) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Sigmoid { x } => {
                    let mut g = gout;
                    for (d, &s) in g.data_mut().iter_mut().zip(self.values[idx].data()) {
                        *d = *d * s * (S::one() - s);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Pool { x, kind, argmax } => {
                    let g = global_pool_backward(self.value(*x).shape(), *kind, argmax, &gout)?;
                    acc(&mut grads, *x, g);
                }
                Op::Linear { x, w, b } => {
                    let lg = linear_backward(self.value(*x), self.value(*w), &gout)?;
                    acc(&mut grads, *x, lg.input);
                    acc(&mut grads, *w, lg.weights);
                    if let Some(b) = b {
                        acc(&mut grads, *b, lg.bias);
                    }
                }
                Op::BnTrain { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = bn_train_backward(cache, self.value(*x).shape(), self.value(*gamma), &gout)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::BnInfer { x, gamma, beta, mean, var, eps } => {
                    let (gx, gg, gb) = bn_infer_backward(self.value(*x), self.value(*gamma), mean, var, *eps, &gout)?;
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                }
                Op::Reshape { x } => {
                    let g = gout.reshape(self.value(*x).shape().to_vec())?;
                    acc(&mut grads, *x, g);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let c = *shape.last().expect("rank >= 1");
                    let scale = gout.data()[0] / S::from_f64(labels.len() as f64);
                    let mut g = probs.clone();
                    for (s, &l) in labels.iter().enumerate() {
                        g[s * c + l] = g[s * c + l] - S::one();
                    }
                    g.iter_mut().for_each(|v| *v = *v * scale);
                    acc(&mut grads, *logits, Tensor::new(shape, g)?);
                }
                Op::WeightedSum { x, weights } => {
                    let mut g = weights.clone();
                    g.scale_assign(gout.data()[0]);
                    acc(&mut grads, *x, g);
                }
            }
            // Intermediate gradients are dropped once propagated.
            grads[idx] = None;
        }

        let grads = grads
            .into_iter()
            .zip(&self.values)
            .map(|(g, v)| match g {
                Some(g) => Ok(g),
                None => Tensor::zeros(v.shape().to_vec()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Grads { grads })
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.weighted_sum(sq, Tensor::ones(vec![3]).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2]).unwrap());
        let unused = tape.leaf(Tensor::ones(vec![4]).unwrap());
        let loss = tape.weighted_sum(x, Tensor::ones(vec![2]).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        for c in [2usize, 5, 400] {
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(Tensor::full(vec![3, c], 0.7).unwrap());
            let l = tape.cross_entropy(z, &[0, 1, c - 1]).unwrap();
            assert!((tape.value(l).data()[0] - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn records_ops_in_order() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 2, 2]).unwrap());
        let r = tape.relu(x);
        let s = tape.sigmoid(r);
        let _ = tape.global_pool(s, PoolKind::GlobalAvg).unwrap();
        assert_eq!(tape.op_names(), vec!["leaf", "relu", "sigmoid", "pool"]);
    }
}
