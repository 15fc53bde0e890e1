use crate::error::Result;
use crate::tensor::{as_nchw, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    GlobalMax,
    GlobalAvg,
}

/// Result of a global pool: `(c)` for `(c,h,w)` input, `(n,c)` for batched.
/// `argmax` holds the in-plane index of each maximum (empty for averages).
#[derive(Clone, Debug)]
pub struct Pooled<S> {
    pub output: Tensor<S>,
    pub argmax: Vec<usize>,
}

fn pooled_shape(input_shape: &[usize], n: usize, c: usize) -> Vec<usize> {
    if input_shape.len() == 3 {
        vec![c]
    } else {
        vec![n, c]
    }
}

/// Global pooling over the spatial axes. Max ties resolve to the lowest
/// linear index.
pub fn global_pool<S: Scalar>(input: &Tensor<S>, kind: PoolKind) -> Result<Pooled<S>> {
    let [n, c, h, w] = as_nchw("global_pool", input.shape())?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    for p in input.data().chunks(plane) {
        match kind {
            PoolKind::GlobalMax => {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate().skip(1) {
                    if v > p[best] {
                        best = i;
                    }
                }
                argmax.push(best);
                out.push(p[best]);
            }
            PoolKind::GlobalAvg => {
                out.push(p.iter().copied().sum::<S>() / S::from_f64(plane as f64));
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(pooled_shape(input.shape(), n, c), out)?,
        argmax,
    })
}

pub fn pool<S: Scalar>(input: &Tensor<S>, kind: PoolKind) -> Result<Tensor<S>> {
    Ok(global_pool(input, kind)?.output)
}

/// Routes `grad_out` back to the input: to the recorded maximum for
/// `GlobalMax`, spread uniformly for `GlobalAvg`.
pub fn global_pool_backward<S: Scalar>(
    input_shape: &[usize],
    kind: PoolKind,
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [_, _, h, w] = as_nchw("global_pool backward", input_shape)?;
    let plane = h * w;
    let mut g = Tensor::zeros(input_shape.to_vec())?;
    let inv = S::one() / S::from_f64(plane as f64);
    for (p, (dst, &go)) in g
        .data_mut()
        .chunks_mut(plane)
        .zip(grad_out.data())
        .enumerate()
    {
        match kind {
            PoolKind::GlobalMax => dst[argmax[p]] = go,
            PoolKind::GlobalAvg => dst.iter_mut().for_each(|v| *v = go * inv),
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_two_value_maps() {
        let x = Tensor::<f32>::full(vec![2, 3, 3], 7.0).unwrap();
        assert_eq!(pool(&x, PoolKind::GlobalMax).unwrap().data(), &[7.0, 7.0]);
        assert_eq!(pool(&x, PoolKind::GlobalAvg).unwrap().data(), &[7.0, 7.0]);
        let y = Tensor::<f32>::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(pool(&y, PoolKind::GlobalAvg).unwrap().data(), &[2.0]);
        assert_eq!(pool(&y, PoolKind::GlobalMax).unwrap().data(), &[3.0]);
    }

    #[test]
    fn max_ties_take_lowest_index() {
        let x = Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 5.0, 5.0, 5.0]).unwrap();
        let p = global_pool(&x, PoolKind::GlobalMax).unwrap();
        assert_eq!(p.argmax, vec![1]);
        let g = global_pool_backward(x.shape(), PoolKind::GlobalMax, &p.argmax, &Tensor::<f32>::ones(vec![1]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
