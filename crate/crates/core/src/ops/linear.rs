use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let (n, d_in) = match *input.shape() {
        [d] => (1, d),
        [n, d] => (n, d),
        _ => return Err(Error::shape("linear", format!("input must be (d_in) or (n, d_in), got {:?}", input.shape()))),
    };
    let &[d_out, w_in] = weights.shape() else {
        return Err(Error::shape("linear", "weights must be (d_out, d_in)"));
    };
    if w_in != d_in {
        return Err(Error::shape(
            "linear",
            format!("input d_in = {d_in} but weights expect {w_in}"),
        ));
    }
    Ok((n, d_in, d_out))
}

fn out_shape(input_shape: &[usize], n: usize, d_out: usize) -> Vec<usize> {
    if input_shape.len() == 1 {
        vec![d_out]
    } else {
        vec![n, d_out]
    }
}

/// `y = W x + b` for `(d_in)` or batched `(n, d_in)` input.
pub fn linear<S: Scalar>(input: &Tensor<S>, weights: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    let (n, d_in, d_out) = dims(input, weights)?;
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape("linear", format!("bias {:?} does not match d_out {d_out}", b.shape())));
        }
    }
    let (x, w) = (input.data(), weights.data());
    let mut out = Vec::with_capacity(n * d_out);
    for row in x.chunks(d_in) {
        for o in 0..d_out {
            let dot: S = w[o * d_in..][..d_in].iter().zip(row).map(|(&a, &b)| a * b).sum();
            out.push(match bias {
                Some(b) => dot + b.data()[o],
                None => dot,
            });
        }
    }
    Tensor::new(out_shape(input.shape(), n, d_out), out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    let (n, d_in, d_out) = dims(input, weights)?;
    if grad_out.numel() != n * d_out {
        return Err(Error::shape("linear backward", "grad_out size differs from output"));
    }
    let (x, w, go) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![S::zero(); n * d_in];
    let mut gw = vec![S::zero(); d_out * d_in];
    let mut gb = vec![S::zero(); d_out];
    for s in 0..n {
        let xr = &x[s * d_in..][..d_in];
        let gxr = &mut gx[s * d_in..][..d_in];
        for o in 0..d_out {
            let g = go[s * d_out + o];
            gb[o] = gb[o] + g;
            let wr = &w[o * d_in..][..d_in];
            let gwr = &mut gw[o * d_in..][..d_in];
            for i in 0..d_in {
                gxr[i] = gxr[i] + g * wr[i];
                gwr[i] = gwr[i] + g * xr[i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![d_out], gb)?,
    })
}
