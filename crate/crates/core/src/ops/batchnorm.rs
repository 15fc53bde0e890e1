//! Batch normalization over `(n, c, h, w)`.
//!
//! Train mode normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate; infer mode applies the
//! running statistics as a fixed per-channel affine map.

use crate::error::{Error, Result};
use crate::tensor::{as_nchw, Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnState<S = f32> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BnState<S> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(vec![channels])?,
            beta: Tensor::zeros(vec![channels])?,
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::ones(vec![channels])?,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Batch statistics saved by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    /// Normalized input before the affine map.
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub mean: Vec<S>,
    /// Biased batch variance.
    pub var: Vec<S>,
    /// Number of reduced elements per channel.
    pub count: usize,
}

fn check<S: Scalar>(input: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<[usize; 4]> {
    let dims = as_nchw("batchnorm2d", input.shape())?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("state has {} channels, input has {c}", gamma.numel()),
        ));
    }
    Ok(dims)
}

pub fn bn_train_forward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let [n, c, h, w] = check(input, gamma, beta)?;
    let plane = h * w;
    let count = n * plane;
    if count < 2 {
        return Err(Error::shape(
            "batchnorm2d",
            format!("train mode needs n*h*w >= 2 per channel, got {count}"),
        ));
    }
    let x = input.data();
    let inv_count = S::one() / S::from_f64(count as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut s = S::zero();
        for b in 0..n {
            s = s + x[(b * c + ch) * plane..][..plane].iter().copied().sum::<S>();
        }
        let m = s * inv_count;
        let mut v = S::zero();
        for b in 0..n {
            for &val in &x[(b * c + ch) * plane..][..plane] {
                v = v + (val - m) * (val - m);
            }
        }
        mean[ch] = m;
        var[ch] = v * inv_count;
    }
    let eps = S::from_f64(eps);
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)` through the batch statistics.
pub fn bn_train_backward<S: Scalar>(
    cache: &BnCache<S>,
    shape: &[usize],
    gamma: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let [n, c, h, w] = as_nchw("batchnorm2d backward", shape)?;
    let plane = h * w;
    let go = grad_out.data();
    let mut gg = vec![S::zero(); c];
    let mut gb = vec![S::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gb[ch] = gb[ch] + go[i];
                gg[ch] = gg[ch] + go[i] * cache.xhat[i];
            }
        }
    }
    let m = S::from_f64(cache.count as f64);
    let mut gx = vec![S::zero(); go.len()];
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / m;
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = k * (m * go[i] - gb[ch] - cache.xhat[i] * gg[ch]);
            }
        }
    }
    Ok((
        Tensor::new(shape.to_vec(), gx)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gb)?,
    ))
}

pub fn bn_infer_forward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let [_, c, h, w] = check(input, gamma, beta)?;
    let plane = h * w;
    let eps = S::from_f64(eps);
    let mut out = input.clone();
    for (p, dst) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = p % c;
        let scale = gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt();
        let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
        dst.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)` with fixed running statistics.
pub fn bn_infer_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: f64,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let [_, c, h, w] = as_nchw("batchnorm2d backward", input.shape())?;
    let plane = h * w;
    let eps = S::from_f64(eps);
    let mut gx = grad_out.clone();
    let mut gg = vec![S::zero(); c];
    let mut gb = vec![S::zero(); c];
    for (p, (dst, src)) in gx
        .data_mut()
        .chunks_mut(plane)
        .zip(input.data().chunks(plane))
        .enumerate()
    {
        let ch = p % c;
        let inv = S::one() / (running_var.data()[ch] + eps).sqrt();
        for (d, &x) in dst.iter_mut().zip(src) {
            gb[ch] = gb[ch] + *d;
            gg[ch] = gg[ch] + *d * (x - running_mean.data()[ch]) * inv;
            *d = *d * gamma.data()[ch] * inv;
        }
    }
    Ok((gx, Tensor::new(vec![c], gg)?, Tensor::new(vec![c], gb)?))
}

/// Exponential moving average update from a train-mode batch; the
/// variance estimate uses the unbiased batch variance.
pub fn update_running_stats<S: Scalar>(
    running_mean: &mut Tensor<S>,
    running_var: &mut Tensor<S>,
    cache: &BnCache<S>,
    momentum: f64,
) {
    let m = S::from_f64(momentum);
    let unbias = S::from_f64(cache.count as f64 / (cache.count as f64 - 1.0));
    for (ch, (rm, rv)) in running_mean
        .data_mut()
        .iter_mut()
        .zip(running_var.data_mut())
        .enumerate()
    {
        *rm = (S::one() - m) * *rm + m * cache.mean[ch];
        *rv = (S::one() - m) * *rv + m * cache.var[ch] * unbias;
    }
}

impl<S: Scalar> BnState<S> {
    pub fn update_running(&mut self, cache: &BnCache<S>) {
        update_running_stats(&mut self.running_mean, &mut self.running_var, cache, self.momentum);
    }
}

/// Stateful convenience wrapper: train mode normalizes with batch statistics
/// and updates the running estimates, infer mode uses the running estimates.
pub fn batchnorm2d<S: Scalar>(input: &Tensor<S>, state: &mut BnState<S>, mode: Mode) -> Result<Tensor<S>> {
    match mode {
        Mode::Train => {
            let (out, cache) = bn_train_forward(input, &state.gamma, &state.beta, state.eps)?;
            state.update_running(&cache);
            Ok(out)
        }
        Mode::Infer => bn_infer_forward(
            input,
            &state.gamma,
            &state.beta,
            &state.running_mean,
            &state.running_var,
            state.eps,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |i| i as f64 - 10.0).unwrap();
        let mut st = BnState::new(3).unwrap();
        // eps shifts the scale by eps/2 relative; keep it below the tolerance.
        st.eps = 1e-8;
        let y = batchnorm2d(&x, &mut st, Mode::Infer).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-6 * x.max_abs());
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f32>::full(vec![2, 2, 3, 3], 4.5).unwrap();
        let mut st = BnState::new(2).unwrap();
        let y = batchnorm2d(&x, &mut st, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!((st.running_mean.data()[0] - 0.45).abs() < 1e-6);
    }

    #[test]
    fn single_element_train_batch_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 1, 1]).unwrap();
        let mut st = BnState::new(2).unwrap();
        assert!(batchnorm2d(&x, &mut st, Mode::Train).is_err());
        assert!(batchnorm2d(&x, &mut st, Mode::Infer).is_ok());
        assert!(batchnorm2d(&x, &mut BnState::new(3).unwrap(), Mode::Infer).is_err());
    }
}
