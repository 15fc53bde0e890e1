#![allow(dead_code)]

pub mod oracle;
pub mod reference;
pub mod suites;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squeezetime::model::ParamStore;
use squeezetime::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng).unwrap()
}

/// Randomizes BN affine parameters, running statistics and position
/// encodings so oracle comparisons exercise every term.
pub fn perturb_store(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for i in 0..store.len() {
        let name = store.name(i).to_string();
        let t = store.tensor_mut(i);
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
        } else if name.ends_with(".beta") || name.ends_with(".pos") || name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
    for rs in store.running_mut() {
        rs.mean.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
        rs.var.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
    }
}
