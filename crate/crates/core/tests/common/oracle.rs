//! Brute-force f64 reference implementations. Straight index loops over
//! flat buffers, written without reference to the library kernels.

#![allow(dead_code)]

use squeezetime::Tensor;

pub type T = Tensor<f64>;

fn t(shape: Vec<usize>, data: Vec<f64>) -> T {
    Tensor::new(shape, data).unwrap()
}

fn dims4(x: &T) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Cross-correlation, `x (n,ci,h,w)`, `k (co,ci,kh,kw)`; `scale (n,ci)`
/// multiplies each input channel before the sum.
pub fn conv2d_scaled(x: &T, k: &T, bias: Option<&T>, scale: Option<&T>, stride: usize, pad: usize) -> T {
    let (n, ci, h, w) = dims4(x);
    let (co, kci, kh, kw) = dims4(k);
    assert_eq!(ci, kci);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
                    for c in 0..ci {
                        let s = scale.map_or(1.0, |s| s.data()[b * ci + c]);
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((o * ci + c) * kh + i) * kw + j];
                                acc += s * xv * kv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    t(vec![n, co, oh, ow], out)
}

pub fn conv2d(x: &T, k: &T, bias: Option<&T>, stride: usize, pad: usize) -> T {
    conv2d_scaled(x, k, bias, None, stride, pad)
}

/// `x (n,ci,t,h,w)`, `k (co,ci,k,k,k)`, stride 1.
pub fn conv3d(x: &T, k: &T, pad: usize) -> T {
    let s = x.shape();
    let (n, ci, tt, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let ks = k.shape();
    let (co, kk) = (ks[0], ks[2]);
    let (ot, oh, ow) = (tt + 2 * pad - kk + 1, h + 2 * pad - kk + 1, w + 2 * pad - kk + 1);
    let mut out = vec![0.0; n * co * ot * oh * ow];
    let at = |v: isize, len: usize| v >= 0 && (v as usize) < len;
    for b in 0..n {
        for o in 0..co {
            for z in 0..ot {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..kk {
                                for i in 0..kk {
                                    for j in 0..kk {
                                        let iz = (z + a) as isize - pad as isize;
                                        let iy = (y + i) as isize - pad as isize;
                                        let ix = (xx + j) as isize - pad as isize;
                                        if !(at(iz, tt) && at(iy, h) && at(ix, w)) {
                                            continue;
                                        }
                                        let xv = x.data()
                                            [(((b * ci + c) * tt + iz as usize) * h + iy as usize) * w + ix as usize];
                                        let kv = k.data()[(((o * ci + c) * kk + a) * kk + i) * kk + j];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        out[(((b * co + o) * ot + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    t(vec![n, co, ot, oh, ow], out)
}

/// `(n,c,h,w) -> (n,c)`.
pub fn global_max(x: &T) -> T {
    let (n, c, h, w) = dims4(x);
    let mut out = vec![f64::NEG_INFINITY; n * c];
    for p in 0..n * c {
        for i in 0..h * w {
            out[p] = out[p].max(x.data()[p * h * w + i]);
        }
    }
    t(vec![n, c], out)
}

pub fn global_avg(x: &T) -> T {
    let (n, c, h, w) = dims4(x);
    let mut out = vec![0.0; n * c];
    for p in 0..n * c {
        for i in 0..h * w {
            out[p] += x.data()[p * h * w + i];
        }
        out[p] /= (h * w) as f64;
    }
    t(vec![n, c], out)
}

/// `x (n,d_in)`, `wt (d_out,d_in)`.
pub fn linear(x: &T, wt: &T, bias: Option<&T>) -> T {
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = wt.shape()[0];
    let mut out = vec![0.0; n * d_out];
    for b in 0..n {
        for o in 0..d_out {
            let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
            for i in 0..d_in {
                acc += x.data()[b * d_in + i] * wt.data()[o * d_in + i];
            }
            out[b * d_out + o] = acc;
        }
    }
    t(vec![n, d_out], out)
}

pub fn relu(x: &T) -> T {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &T) -> T {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn add(a: &T, b: &T) -> T {
    assert_eq!(a.shape(), b.shape());
    t(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

pub fn mul(a: &T, b: &T) -> T {
    assert_eq!(a.shape(), b.shape());
    t(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

/// Adds a per-channel offset `(c)` (any shape holding c values) to `(n,c,h,w)`.
pub fn add_channel(x: &T, offset: &T) -> T {
    let (n, c, h, w) = dims4(x);
    assert_eq!(offset.numel(), c);
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                out.data_mut()[(b * c + ch) * h * w + i] += offset.data()[ch];
            }
        }
    }
    out
}

/// Channel weights: sigmoid(w2 · relu(w1 · maxpool(x) + b1) + b2), `(n, c)`.
pub fn wcm(x: &T, w1: &T, b1: &T, w2: &T, b2: &T) -> T {
    sigmoid(&linear(&relu(&linear(&global_max(x), w1, Some(b1))), w2, Some(b2)))
}

/// Train-mode batch norm with biased batch variance.
pub fn bn_train(x: &T, gamma: &T, beta: &T, eps: f64) -> T {
    let (n, c, h, w) = dims4(x);
    let m = (n * h * w) as f64;
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h * w).map(move |i| (b * c + ch) * h * w + i))
            .map(|i| x.data()[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        for b in 0..n {
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out.data_mut()[idx] = gamma.data()[ch] * (x.data()[idx] - mean) / (var + eps).sqrt() + beta.data()[ch];
            }
        }
    }
    out
}

pub fn bn_infer(x: &T, gamma: &T, beta: &T, mean: &T, var: &T, eps: f64) -> T {
    let (n, c, h, w) = dims4(x);
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out.data_mut()[idx] = gamma.data()[ch] * (x.data()[idx] - mean.data()[ch])
                    / (var.data()[ch] + eps).sqrt()
                    + beta.data()[ch];
            }
        }
    }
    out
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &T, labels: &[usize]) -> f64 {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for b in 0..n {
        let row = &logits.data()[b * c..(b + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[labels[b]];
    }
    total / n as f64
}

/// Largest absolute difference divided by the largest reference magnitude.
pub fn rel_err(got: &T, want: &T) -> f64 {
    assert_eq!(got.shape(), want.shape(), "shape");
    let diff = got.data().iter().zip(want.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / want.max_abs().max(1e-30)
}
