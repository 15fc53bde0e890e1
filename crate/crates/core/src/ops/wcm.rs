//! Weight computation module: global max pool followed by a two-layer MLP,
//! producing one gating weight in (0, 1) per input channel.

use rand::Rng;

use super::linear::linear;
use super::pointwise::{relu, sigmoid};
use super::pool::{pool, PoolKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct WcmParams<S = f32> {
    /// `(c_hidden, c_in)`
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    /// `(c_in, c_hidden)`
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Hidden width for `channels` inputs under a reduction divisor, at least 1.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl<S: Scalar> WcmParams<S> {
    pub fn zeros(channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: Tensor::zeros(vec![hidden, channels])?,
            b1: Tensor::zeros(vec![hidden])?,
            w2: Tensor::zeros(vec![channels, hidden])?,
            b2: Tensor::zeros(vec![channels])?,
        })
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: Tensor::randn(vec![hidden, channels], (2.0 / channels as f64).sqrt(), rng)?,
            b1: Tensor::randn(vec![hidden], 0.1, rng)?,
            w2: Tensor::randn(vec![channels, hidden], (2.0 / hidden as f64).sqrt(), rng)?,
            b2: Tensor::randn(vec![channels], 0.1, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }
}

/// `sigmoid(w2 · relu(w1 · globalmax(x) + b1) + b2)`; returns `(c)` for
/// `(c,h,w)` input and `(n,c)` for batched input.
pub fn wcm<S: Scalar>(input: &Tensor<S>, params: &WcmParams<S>) -> Result<Tensor<S>> {
    let c = match *input.shape() {
        [c, _, _] | [_, c, _, _] => c,
        _ => return Err(Error::shape("wcm", format!("expected (c,h,w) or (n,c,h,w), got {:?}", input.shape()))),
    };
    if c != params.channels() {
        return Err(Error::shape(
            "wcm",
            format!("input has {c} channels, params expect {}", params.channels()),
        ));
    }
    let pooled = pool(input, PoolKind::GlobalMax)?;
    let hidden = relu(&linear(&pooled, &params.w1, Some(&params.b1))?);
    Ok(sigmoid(&linear(&hidden, &params.w2, Some(&params.b2))?))
}
