//! 2D convolution, temporal focus convolution and a naive 3D convolution.
//!
//! All kernels compute cross-correlation, `out[y, x] += k[i, j] * in[y*s + i - p, x*s + j - p]`,
//! with symmetric zero padding. Flipping the kernel gives the textbook
//! convolution; nothing in the network depends on the orientation.

use num_traits::Zero;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{as_nchw, Scalar, Tensor};

/// Work size (multiply-accumulates) above which kernels fan out over rayon.
const PAR_THRESHOLD: usize = 1 << 15;

/// Kernel, optional bias and geometry of a square 2D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<S = f32> {
    /// `(c_out, c_in, k, k)`
    pub kernel: Tensor<S>,
    /// `(c_out)`
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(kernel: Tensor<S>, bias: Option<Tensor<S>>, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub(crate) fn new(
        op: &'static str,
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c_in, h, w] = as_nchw(op, input_shape)?;
        let &[c_out, kc_in, kh, kw] = kernel_shape else {
            return Err(Error::shape(
                op,
                format!("kernel must be (c_out, c_in, k, k), got {kernel_shape:?}"),
            ));
        };
        if kh != kw {
            return Err(Error::shape(
                op,
                format!("non-square kernel {kh}x{kw}; only square kernels are supported"),
            ));
        }
        if kc_in != c_in {
            return Err(Error::shape(
                op,
                format!("input channels (dim c_in) = {c_in} but kernel expects {kc_in}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(
                op,
                format!("input height {h} + 2*padding {pad} is smaller than kernel {kh}"),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                op,
                format!("input width {w} + 2*padding {pad} is smaller than kernel {kw}"),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn macs(&self) -> usize {
        self.n * self.c_out * self.c_in * self.k * self.k * self.oh * self.ow
    }

    /// Output positions `o` along an axis of length `len` whose source
    /// index `o*stride + tap - pad` lands inside `[0, len)`.
    #[inline]
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let hi = if len + p > tap {
            ((len - 1 + p - tap) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn output_shape(input_shape: &[usize], g: &ConvGeometry) -> Vec<usize> {
    if input_shape.len() == 3 {
        vec![g.c_out, g.oh, g.ow]
    } else {
        vec![g.n, g.c_out, g.oh, g.ow]
    }
}

fn for_each_plane<S: Scalar>(
    out: &mut [S],
    plane: usize,
    parallel: bool,
    f: impl Fn(usize, &mut [S]) + Sync + Send,
) {
    if parallel {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Forward pass over raw buffers. `scale`, when present, holds one weight
/// per `(sample, input channel)` folded into the kernel taps.
pub(crate) fn conv2d_forward_raw<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    kernel: &[S],
    bias: Option<&[S]>,
    scale: Option<&[S]>,
) -> Vec<S> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let kk = g.k * g.k;
    let mut out = vec![S::zero(); g.n * g.c_out * plane_out];
    for_each_plane(&mut out, plane_out, g.macs() > PAR_THRESHOLD, |idx, dst| {
        let (n, co) = (idx / g.c_out, idx % g.c_out);
        let mut acc = vec![bias.map_or(S::Acc::zero(), |b| b[co].to_acc()); plane_out];
        for ci in 0..g.c_in {
            let src = &input[(n * g.c_in + ci) * plane_in..][..plane_in];
            let taps = &kernel[(co * g.c_in + ci) * kk..][..kk];
            let s = scale.map(|s| s[n * g.c_in + ci].to_acc());
            for ki in 0..g.k {
                let (y_lo, y_hi) = g.valid_range(ki, g.h, g.oh);
                for kj in 0..g.k {
                    let coef = match s {
                        Some(s) => s * taps[ki * g.k + kj].to_acc(),
                        None => taps[ki * g.k + kj].to_acc(),
                    };
                    let (x_lo, x_hi) = g.valid_range(kj, g.w, g.ow);
                    if x_lo == x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let row = &src[iy * g.w..][..g.w];
                        let out_row = &mut acc[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let off = x_lo + kj - g.pad;
                            for (o, &v) in out_row[x_lo..x_hi].iter_mut().zip(&row[off..]) {
                                *o = *o + coef * v.to_acc();
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ox * g.stride + kj - g.pad;
                                out_row[ox] = out_row[ox] + coef * row[ix].to_acc();
                            }
                        }
                    }
                }
            }
        }
        for (d, &a) in dst.iter_mut().zip(&acc) {
            *d = S::from_acc(a);
        }
    });
    out
}

/// Gradient with respect to the (unscaled) input: the transposed
/// correlation of `grad_out` with the kernel.
pub(crate) fn conv2d_input_grad_raw<S: Scalar>(
    g: &ConvGeometry,
    kernel: &[S],
    grad_out: &[S],
) -> Vec<S> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let kk = g.k * g.k;
    let mut gin = vec![S::zero(); g.n * g.c_in * plane_in];
    for_each_plane(&mut gin, plane_in, g.macs() > PAR_THRESHOLD, |idx, dst| {
        let (n, ci) = (idx / g.c_in, idx % g.c_in);
        let mut acc = vec![S::Acc::zero(); plane_in];
        for co in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + co) * plane_out..][..plane_out];
            let taps = &kernel[(co * g.c_in + ci) * kk..][..kk];
            for ki in 0..g.k {
                let (y_lo, y_hi) = g.valid_range(ki, g.h, g.oh);
                for kj in 0..g.k {
                    let coef = taps[ki * g.k + kj].to_acc();
                    let (x_lo, x_hi) = g.valid_range(kj, g.w, g.ow);
                    if x_lo == x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let row = &mut acc[iy * g.w..][..g.w];
                        let grow = &go[oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let off = x_lo + kj - g.pad;
                            for (d, &v) in row[off..off + (x_hi - x_lo)].iter_mut().zip(&grow[x_lo..x_hi]) {
                                *d = *d + coef * v.to_acc();
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ox * g.stride + kj - g.pad;
                                row[ix] = row[ix] + coef * grow[ox].to_acc();
                            }
                        }
                    }
                }
            }
        }
        for (d, &a) in dst.iter_mut().zip(&acc) {
            *d = S::from_acc(a);
        }
    });
    gin
}

/// Gradient with respect to the kernel. Per-sample sums are accumulated in
/// sample order so the result does not depend on the thread count.
pub(crate) fn conv2d_kernel_grad_raw<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    scale: Option<&[S]>,
    grad_out: &[S],
) -> Vec<S> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let per_out = g.c_in * g.k * g.k;
    let mut gk = vec![S::zero(); g.c_out * per_out];
    for_each_plane(&mut gk, per_out, g.macs() > PAR_THRESHOLD, |co, dst| {
        for ci in 0..g.c_in {
            for ki in 0..g.k {
                let (y_lo, y_hi) = g.valid_range(ki, g.h, g.oh);
                for kj in 0..g.k {
                    let (x_lo, x_hi) = g.valid_range(kj, g.w, g.ow);
                    if x_lo == x_hi {
                        continue;
                    }
                    let mut acc = S::Acc::zero();
                    for n in 0..g.n {
                        let src = &input[(n * g.c_in + ci) * plane_in..][..plane_in];
                        let go = &grad_out[(n * g.c_out + co) * plane_out..][..plane_out];
                        let mut part = S::Acc::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ki - g.pad;
                            let row = &src[iy * g.w..][..g.w];
                            let grow = &go[oy * g.ow..][..g.ow];
                            for ox in x_lo..x_hi {
                                part = part + grow[ox].to_acc() * row[ox * g.stride + kj - g.pad].to_acc();
                            }
                        }
                        acc = acc + match scale {
                            Some(s) => s[n * g.c_in + ci].to_acc() * part,
                            None => part,
                        };
                    }
                    dst[(ci * g.k + ki) * g.k + kj] = S::from_acc(acc);
                }
            }
        }
    });
    gk
}

pub(crate) fn bias_grad_raw<S: Scalar>(g: &ConvGeometry, grad_out: &[S]) -> Vec<S> {
    let plane = g.oh * g.ow;
    (0..g.c_out)
        .map(|co| {
            let total = (0..g.n).fold(S::Acc::zero(), |acc, n| {
                grad_out[(n * g.c_out + co) * plane..][..plane]
                    .iter()
                    .fold(acc, |a, &v| a + v.to_acc())
            });
            S::from_acc(total)
        })
        .collect()
}

fn check_bias<S: Scalar>(op: &'static str, bias: Option<&Tensor<S>>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?} does not match c_out {c_out}", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Gradients of a convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<S = f32> {
    pub input: Tensor<S>,
    pub kernel: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

/// Square 2D cross-correlation over `(c, h, w)` or `(n, c, h, w)` input.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<Tensor<S>> {
    let g = ConvGeometry::new(
        "conv2d",
        input.shape(),
        params.kernel.shape(),
        params.stride,
        params.padding,
    )?;
    check_bias("conv2d", params.bias.as_ref(), g.c_out)?;
    let out = conv2d_forward_raw(
        &g,
        input.data(),
        params.kernel.data(),
        params.bias.as_ref().map(|b| b.data()),
        None,
    );
    Tensor::new(output_shape(input.shape(), &g), out)
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let g = ConvGeometry::new(
        "conv2d",
        input.shape(),
        params.kernel.shape(),
        params.stride,
        params.padding,
    )?;
    if grad_out.shape() != output_shape(input.shape(), &g).as_slice() {
        return Err(Error::shape("conv2d backward", "grad_out shape differs from output"));
    }
    let gin = conv2d_input_grad_raw(&g, params.kernel.data(), grad_out.data());
    let gk = conv2d_kernel_grad_raw(&g, input.data(), None, grad_out.data());
    let gb = match &params.bias {
        Some(_) => Some(Tensor::new(vec![g.c_out], bias_grad_raw(&g, grad_out.data()))?),
        None => None,
    };
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        kernel: Tensor::new(params.kernel.shape().to_vec(), gk)?,
        bias: gb,
    })
}

/// Expands channel weights given as `(c)` (shared by every sample) or
/// `(n, c)` into a flat `(n, c)` buffer.
fn expand_channel_weights<S: Scalar>(
    op: &'static str,
    weights: &Tensor<S>,
    n: usize,
    c: usize,
) -> Result<Vec<S>> {
    match *weights.shape() {
        [len] if len == c => Ok(weights.data().repeat(n)),
        [wn, len] if wn == n && len == c => Ok(weights.data().to_vec()),
        _ => Err(Error::shape(
            op,
            format!(
                "channel weights {:?} do not match {c} input channels (batch {n})",
                weights.shape()
            ),
        )),
    }
}

/// Temporal focus convolution: input channel `m` of every tap is weighted by
/// `channel_weights[m]` before accumulation. Weights may be `(c_in)` or
/// per-sample `(n, c_in)`.
pub fn tfc2d<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    channel_weights: &Tensor<S>,
) -> Result<Tensor<S>> {
    let g = ConvGeometry::new(
        "tfc2d",
        input.shape(),
        params.kernel.shape(),
        params.stride,
        params.padding,
    )?;
    check_bias("tfc2d", params.bias.as_ref(), g.c_out)?;
    let scale = expand_channel_weights("tfc2d", channel_weights, g.n, g.c_in)?;
    let out = conv2d_forward_raw(
        &g,
        input.data(),
        params.kernel.data(),
        params.bias.as_ref().map(|b| b.data()),
        Some(&scale),
    );
    Tensor::new(output_shape(input.shape(), &g), out)
}

#[derive(Clone, Debug)]
pub struct TfcGrads<S = f32> {
    pub input: Tensor<S>,
    pub kernel: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    /// Same shape as the channel weights passed to the forward pass.
    pub channel_weights: Tensor<S>,
}

pub(crate) struct TfcRawGrads<S> {
    pub input: Vec<S>,
    pub kernel: Vec<S>,
    pub bias: Vec<S>,
    /// `(n, c_in)`
    pub scale: Vec<S>,
}

pub(crate) fn tfc2d_backward_raw<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    kernel: &[S],
    scale: &[S],
    grad_out: &[S],
) -> TfcRawGrads<S> {
    let plane_in = g.h * g.w;
    let mut gin = conv2d_input_grad_raw(g, kernel, grad_out);
    let mut gscale = vec![S::zero(); g.n * g.c_in];
    for (p, (dst, src)) in gin
        .chunks_mut(plane_in)
        .zip(input.chunks(plane_in))
        .enumerate()
    {
        gscale[p] = S::from_acc(
            dst.iter()
                .zip(src)
                .fold(S::Acc::zero(), |acc, (&a, &b)| acc + a.to_acc() * b.to_acc()),
        );
        let s = scale[p];
        dst.iter_mut().for_each(|v| *v = *v * s);
    }
    TfcRawGrads {
        input: gin,
        kernel: conv2d_kernel_grad_raw(g, input, Some(scale), grad_out),
        bias: bias_grad_raw(g, grad_out),
        scale: gscale,
    }
}

pub fn tfc2d_backward<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    channel_weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<TfcGrads<S>> {
    let g = ConvGeometry::new(
        "tfc2d",
        input.shape(),
        params.kernel.shape(),
        params.stride,
        params.padding,
    )?;
    if grad_out.shape() != output_shape(input.shape(), &g).as_slice() {
        return Err(Error::shape("tfc2d backward", "grad_out shape differs from output"));
    }
    let scale = expand_channel_weights("tfc2d", channel_weights, g.n, g.c_in)?;
    let raw = tfc2d_backward_raw(&g, input.data(), params.kernel.data(), &scale, grad_out.data());
    // Shared (c_in) weights collect the gradient of every sample.
    let gw = if channel_weights.rank() == 1 {
        let mut acc = vec![S::zero(); g.c_in];
        for row in raw.scale.chunks(g.c_in) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        acc
    } else {
        raw.scale
    };
    Ok(TfcGrads {
        input: Tensor::new(input.shape().to_vec(), raw.input)?,
        kernel: Tensor::new(params.kernel.shape().to_vec(), raw.kernel)?,
        bias: match &params.bias {
            Some(_) => Some(Tensor::new(vec![g.c_out], raw.bias)?),
            None => None,
        },
        channel_weights: Tensor::new(channel_weights.shape().to_vec(), gw)?,
    })
}

/// Multiplies every input channel plane by its weight; weights as in [`tfc2d`].
pub fn scale_channels<S: Scalar>(input: &Tensor<S>, channel_weights: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, h, w] = as_nchw("scale_channels", input.shape())?;
    let scale = expand_channel_weights("scale_channels", channel_weights, n, c)?;
    let plane = h * w;
    let mut out = input.clone();
    for (p, dst) in out.data_mut().chunks_mut(plane).enumerate() {
        dst.iter_mut().for_each(|v| *v = *v * scale[p]);
    }
    Ok(out)
}

/// Naive 3D cross-correlation over `(c, t, h, w)` or `(n, c, t, h, w)` with a
/// cubic `(c_out, c_in, k, k, k)` kernel, stride 1 and symmetric padding.
/// Used as the single-layer 3D reference in benchmarks.
pub fn conv3d<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, padding: usize) -> Result<Tensor<S>> {
    let (batched, [n, c_in, t, h, w]) = match *input.shape() {
        [c, t, h, w] => (false, [1, c, t, h, w]),
        [n, c, t, h, w] => (true, [n, c, t, h, w]),
        _ => {
            return Err(Error::shape(
                "conv3d",
                format!("expected (c,t,h,w) or (n,c,t,h,w), got {:?}", input.shape()),
            ))
        }
    };
    let &[c_out, kc, k, kh, kw] = kernel.shape() else {
        return Err(Error::shape("conv3d", "kernel must be (c_out, c_in, k, k, k)"));
    };
    if kh != k || kw != k {
        return Err(Error::shape("conv3d", "non-cubic kernel"));
    }
    if kc != c_in {
        return Err(Error::shape(
            "conv3d",
            format!("input channels (dim c_in) = {c_in} but kernel expects {kc}"),
        ));
    }
    if t + 2 * padding < k || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape("conv3d", "input smaller than kernel"));
    }
    let (ot, oh, ow) = (t + 2 * padding - k + 1, h + 2 * padding - k + 1, w + 2 * padding - k + 1);
    let vol_in = t * h * w;
    let vol_out = ot * oh * ow;
    let k3 = k * k * k;
    let kd = kernel.data();
    let src_all = input.data();
    let range = |tap: usize, len: usize, out_len: usize| {
        let lo = padding.saturating_sub(tap);
        let hi = (len + padding).saturating_sub(tap).min(out_len);
        (lo.min(hi), hi)
    };
    let mut out = vec![S::zero(); n * c_out * vol_out];
    let macs = n * c_out * c_in * k3 * vol_out;
    for_each_plane(&mut out, vol_out, macs > PAR_THRESHOLD, |idx, dst| {
        let (b, co) = (idx / c_out, idx % c_out);
        for ci in 0..c_in {
            let src = &src_all[(b * c_in + ci) * vol_in..][..vol_in];
            let taps = &kd[(co * c_in + ci) * k3..][..k3];
            for kt in 0..k {
                let (t_lo, t_hi) = range(kt, t, ot);
                for ki in 0..k {
                    let (y_lo, y_hi) = range(ki, h, oh);
                    for kj in 0..k {
                        let coef = taps[(kt * k + ki) * k + kj];
                        let (x_lo, x_hi) = range(kj, w, ow);
                        if x_lo == x_hi {
                            continue;
                        }
                        let off = x_lo + kj - padding;
                        for ozt in t_lo..t_hi {
                            let it = ozt + kt - padding;
                            for oy in y_lo..y_hi {
                                let iy = oy + ki - padding;
                                let row = &src[(it * h + iy) * w..][..w];
                                let out_row = &mut dst[(ozt * oh + oy) * ow..][..ow];
                                for (o, &v) in out_row[x_lo..x_hi].iter_mut().zip(&row[off..]) {
                                    *o = *o + coef * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let shape = if batched {
        vec![n, c_out, ot, oh, ow]
    } else {
        vec![c_out, ot, oh, ow]
    };
    Tensor::new(shape, out)
}
