//! Measurement suites shared by the focused tests and the acceptance run.

#![allow(dead_code)]

use rand::Rng;
use squeezetime::gradcheck::{nudge_from_zero, GradCheck, GradCheckReport};
use squeezetime::model::{build_model, ModelConfig};
use squeezetime::ops::{
    self, batchnorm::BnState, conv2d, linear, pool, scale_channels, tfc2d, wcm, ConvParams, Mode, PoolKind, WcmParams,
};
use squeezetime::{Scalar, Tape, Tensor, Var};

use super::oracle::{self, rel_err};
use super::{randn, rng};

#[derive(Clone, Debug)]
pub struct OpError {
    pub op: &'static str,
    pub cases: usize,
    /// Library kernel in f64 against the oracle.
    pub f64_err: f64,
    /// Library kernel in f32 (inputs rounded to f32) against the oracle.
    pub f32_err: f64,
}

impl OpError {
    fn new(op: &'static str) -> Self {
        Self {
            op,
            cases: 0,
            f64_err: 0.0,
            f32_err: 0.0,
        }
    }

    fn record(&mut self, f64_err: f64, f32_err: f64) {
        self.cases += 1;
        self.f64_err = self.f64_err.max(f64_err);
        self.f32_err = self.f32_err.max(f32_err);
    }
}

fn f32_round(t: &Tensor<f64>) -> Tensor<f64> {
    t.cast::<f32>().cast::<f64>()
}

/// Runs `f` in both precisions on f32-representable inputs and compares each
/// against `want` computed by the oracle on the same inputs.
fn both<F32, F64>(want: &Tensor<f64>, f64_run: F64, f32_run: F32) -> (f64, f64)
where
    F64: Fn() -> Tensor<f64>,
    F32: Fn() -> Tensor<f32>,
{
    (rel_err(&f64_run(), want), rel_err(&f32_run().cast(), want))
}

struct ConvCase {
    x: Tensor<f64>,
    k: Tensor<f64>,
    bias: Option<Tensor<f64>>,
    stride: usize,
    pad: usize,
}

fn conv_case(seed: u64) -> ConvCase {
    let mut r = rng(seed);
    let n = r.gen_range(1..=2);
    let ci = r.gen_range(1..=4);
    let co = r.gen_range(1..=4);
    let k: usize = [1, 2, 3, 5][r.gen_range(0..4)];
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=k / 2);
    let lo = k.saturating_sub(2 * pad).max(1);
    let h = r.gen_range(lo..=6);
    let w = r.gen_range(lo..=6);
    let x = f32_round(&randn(&[n, ci, h, w], &mut r));
    let kt = f32_round(&randn(&[co, ci, k, k], &mut r));
    let bias = r.gen_bool(0.5).then(|| f32_round(&randn(&[co], &mut r)));
    ConvCase {
        x,
        k: kt,
        bias,
        stride,
        pad,
    }
}

fn params<S: Scalar>(c: &ConvCase) -> ConvParams<S> {
    ConvParams::new(c.k.cast(), c.bias.as_ref().map(Tensor::cast), c.stride, c.pad)
}

/// Every kernel against its oracle over `cases` seeded random instances.
pub fn kernel_suite(cases: u64) -> Vec<OpError> {
    let mut conv = OpError::new("conv2d");
    let mut tfc = OpError::new("tfc2d");
    let mut wcm_e = OpError::new("wcm");
    let mut pool_e = OpError::new("global_pool");
    let mut lin = OpError::new("linear");
    let mut bn = OpError::new("batchnorm");
    for seed in 0..cases {
        let c = conv_case(seed);
        let want = oracle::conv2d(&c.x, &c.k, c.bias.as_ref(), c.stride, c.pad);
        let (a, b) = both(
            &want,
            || conv2d(&c.x, &params::<f64>(&c)).unwrap(),
            || conv2d(&c.x.cast(), &params::<f32>(&c)).unwrap(),
        );
        conv.record(a, b);

        let mut r = rng(1000 + seed);
        let (n, ci) = (c.x.shape()[0], c.x.shape()[1]);
        let wts = f32_round(&Tensor::uniform(vec![n, ci], 0.0, 1.0, &mut r).unwrap());
        let want = oracle::conv2d_scaled(&c.x, &c.k, c.bias.as_ref(), Some(&wts), c.stride, c.pad);
        let (a, b) = both(
            &want,
            || tfc2d(&c.x, &params::<f64>(&c), &wts).unwrap(),
            || tfc2d(&c.x.cast(), &params::<f32>(&c), &wts.cast()).unwrap(),
        );
        tfc.record(a, b);

        let hidden = r.gen_range(1..=ci + 2);
        let p = WcmParams::<f64>::random(ci, hidden, &mut r).unwrap();
        let p = WcmParams {
            w1: f32_round(&p.w1),
            b1: f32_round(&p.b1),
            w2: f32_round(&p.w2),
            b2: f32_round(&p.b2),
        };
        let p32 = WcmParams::<f32> {
            w1: p.w1.cast(),
            b1: p.b1.cast(),
            w2: p.w2.cast(),
            b2: p.b2.cast(),
        };
        let want = oracle::wcm(&c.x, &p.w1, &p.b1, &p.w2, &p.b2);
        let (a, b) = both(&want, || wcm(&c.x, &p).unwrap(), || wcm(&c.x.cast(), &p32).unwrap());
        wcm_e.record(a, b);

        for (kind, want) in [
            (PoolKind::GlobalMax, oracle::global_max(&c.x)),
            (PoolKind::GlobalAvg, oracle::global_avg(&c.x)),
        ] {
            let (a, b) = both(&want, || pool(&c.x, kind).unwrap(), || pool(&c.x.cast(), kind).unwrap());
            pool_e.record(a, b);
        }

        let (d_in, d_out) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let xl = f32_round(&randn(&[n, d_in], &mut r));
        let wl = f32_round(&randn(&[d_out, d_in], &mut r));
        let bl = f32_round(&randn(&[d_out], &mut r));
        let want = oracle::linear(&xl, &wl, Some(&bl));
        let (a, b) = both(
            &want,
            || linear(&xl, &wl, Some(&bl)).unwrap(),
            || linear(&xl.cast(), &wl.cast(), Some(&bl.cast())).unwrap(),
        );
        lin.record(a, b);

        if n * c.x.shape()[2] * c.x.shape()[3] >= 2 {
            let mut st = BnState::<f64>::new(ci).unwrap();
            st.gamma = f32_round(&Tensor::uniform(vec![ci], 0.5, 1.5, &mut r).unwrap());
            st.beta = f32_round(&randn(&[ci], &mut r));
            let want = oracle::bn_train(&c.x, &st.gamma, &st.beta, st.eps);
            let mut st32 = BnState::<f32> {
                gamma: st.gamma.cast(),
                beta: st.beta.cast(),
                running_mean: st.running_mean.cast(),
                running_var: st.running_var.cast(),
                eps: st.eps,
                momentum: st.momentum,
            };
            let (a, b) = both(
                &want,
                || ops::batchnorm2d(&c.x, &mut st.clone(), Mode::Train).unwrap(),
                || ops::batchnorm2d(&c.x.cast(), &mut st32.clone(), Mode::Train).unwrap(),
            );
            bn.record(a, b);
            st.running_mean = f32_round(&randn(&[ci], &mut r));
            st.running_var = f32_round(&Tensor::uniform(vec![ci], 0.5, 2.0, &mut r).unwrap());
            st32.running_mean = st.running_mean.cast();
            st32.running_var = st.running_var.cast();
            let want = oracle::bn_infer(&c.x, &st.gamma, &st.beta, &st.running_mean, &st.running_var, st.eps);
            let (a, b) = both(
                &want,
                || ops::batchnorm2d(&c.x, &mut st.clone(), Mode::Infer).unwrap(),
                || ops::batchnorm2d(&c.x.cast(), &mut st32.clone(), Mode::Infer).unwrap(),
            );
            bn.record(a, b);
        }
    }
    vec![conv, tfc, wcm_e, pool_e, lin, bn]
}

/// Largest gap of `tfc2d(x, p, ones)` from `conv2d(x, p)` (f32), and of
/// `tfc2d(x, p, w)` from `conv2d(scale_channels(x, w), p)` (f32).
pub fn tfc_identities(cases: u64) -> (f64, f64) {
    let (mut ones_gap, mut factor_gap) = (0.0f64, 0.0f64);
    for seed in 0..cases {
        let c = conv_case(seed);
        let x: Tensor<f32> = c.x.cast();
        let p = params::<f32>(&c);
        let base = conv2d(&x, &p).unwrap();
        let ci = x.shape()[1];
        let unit = tfc2d(&x, &p, &Tensor::ones(vec![ci]).unwrap()).unwrap();
        ones_gap = ones_gap.max(rel_err(&unit.cast(), &base.cast()));
        let mut r = rng(2000 + seed);
        let w = Tensor::<f32>::uniform(vec![ci], 0.0, 1.0, &mut r).unwrap();
        let scaled = conv2d(&scale_channels(&x, &w).unwrap(), &p).unwrap();
        let fused = tfc2d(&x, &p, &w).unwrap();
        factor_gap = factor_gap.max(rel_err(&fused.cast(), &scaled.cast()));
    }
    (ones_gap, factor_gap)
}

pub type Closure = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> squeezetime::Result<Var>>;

/// Weighted sum with fixed pseudo-random weights, so every output element
/// receives a distinct upstream gradient.
pub fn probe(tape: &mut Tape<f64>, v: Var, seed: u64) -> squeezetime::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))?;
    tape.weighted_sum(v, w)
}

/// One gradient check per differentiable op, on random points.
pub fn op_gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(77);
    let x = randn(&[2, 3, 5, 5], &mut r);
    let k3 = randn(&[4, 3, 3, 3], &mut r);
    let bias = randn(&[4], &mut r);
    let wts = Tensor::uniform(vec![2, 3], 0.1, 1.0, &mut r).unwrap();
    let chan = randn(&[3, 1, 1], &mut r);
    let same = randn(&[2, 3, 5, 5], &mut r);
    let relu_in = nudge_from_zero(&randn(&[2, 3, 4, 4], &mut r), 1e-3);
    let lin_x = randn(&[3, 6], &mut r);
    let lin_w = randn(&[4, 6], &mut r);
    let lin_b = randn(&[4], &mut r);
    let gamma = Tensor::uniform(vec![3], 0.5, 1.5, &mut r).unwrap();
    let beta = randn(&[3], &mut r);
    let mean = randn(&[3], &mut r);
    let var = Tensor::uniform(vec![3], 0.5, 2.0, &mut r).unwrap();
    let logits = randn(&[4, 5], &mut r);

    let cases: Vec<(&'static str, Closure, Vec<Tensor<f64>>)> = vec![
        (
            "conv2d",
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                probe(t, y, 1)
            }),
            vec![x.clone(), k3.clone(), bias.clone()],
        ),
        (
            "tfc2d",
            Box::new(|t, v| {
                let y = t.tfc2d(v[0], v[1], Some(v[2]), v[3], 1, 1)?;
                probe(t, y, 2)
            }),
            vec![x.clone(), k3.clone(), bias.clone(), wts.clone()],
        ),
        (
            "add",
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.add(a, v[2])?;
                probe(t, b, 3)
            }),
            vec![x.clone(), same.clone(), chan.clone()],
        ),
        (
            "mul",
            Box::new(|t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.mul(a, v[2])?;
                probe(t, b, 4)
            }),
            vec![x.clone(), same.clone(), chan.clone()],
        ),
        (
            "relu",
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                probe(t, y, 5)
            }),
            vec![relu_in],
        ),
        (
            "sigmoid",
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                probe(t, y, 6)
            }),
            vec![x.clone()],
        ),
        (
            "global_max_pool",
            Box::new(|t, v| {
                let y = t.global_pool(v[0], PoolKind::GlobalMax)?;
                probe(t, y, 7)
            }),
            vec![x.clone()],
        ),
        (
            "global_avg_pool",
            Box::new(|t, v| {
                let y = t.global_pool(v[0], PoolKind::GlobalAvg)?;
                probe(t, y, 8)
            }),
            vec![x.clone()],
        ),
        (
            "linear",
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe(t, y, 9)
            }),
            vec![lin_x, lin_w, lin_b],
        ),
        (
            "batchnorm_train",
            Box::new(|t, v| {
                let y = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, 10)
            }),
            vec![x.clone(), gamma.clone(), beta.clone()],
        ),
        (
            "batchnorm_infer",
            Box::new(move |t, v| {
                let y = t.batchnorm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                probe(t, y, 11)
            }),
            vec![x.clone(), gamma, beta],
        ),
        (
            "reshape",
            Box::new(|t, v| {
                let y = t.reshape(v[0], vec![6, 25])?;
                probe(t, y, 12)
            }),
            vec![x.clone()],
        ),
        (
            "cross_entropy",
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2])),
            vec![logits],
        ),
        (
            "conv_relu_avgpool",
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1)?;
                let y = t.relu(y);
                let y = t.global_pool(y, PoolKind::GlobalAvg)?;
                probe(t, y, 13)
            }),
            vec![x, k3],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f, pts)| (name, GradCheck::default().run(f, &pts).unwrap()))
        .collect()
}

/// Relative error reported when the conv kernel gradient is scaled by 1.01.
pub fn mutated_backward_error() -> f64 {
    let mut r = rng(5);
    let x = randn(&[1, 2, 4, 4], &mut r);
    let k = randn(&[3, 2, 3, 3], &mut r);
    let run = |pts: &[Tensor<f64>]| -> squeezetime::Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut t = Tape::new();
        let vx = t.leaf(pts[0].clone());
        let vk = t.leaf(pts[1].clone());
        let y = t.conv2d(vx, vk, None, 1, 1)?;
        let l = probe(&mut t, y, 14)?;
        Ok((t, l, vec![vx, vk]))
    };
    let pts = vec![x, k];
    let (tape, loss, vars) = run(&pts).unwrap();
    let mut g = tape.backward(loss).unwrap();
    let gx = g.take(vars[0]);
    let mut gk = g.take(vars[1]);
    gk.scale_assign(1.01);
    let eval = |p: &[Tensor<f64>]| {
        let (t, l, _) = run(p)?;
        Ok((t.value(l).data()[0], t.branch_signature()))
    };
    GradCheck::default().compare(eval, &pts, &[gx, gk]).unwrap().max_rel_error
}

/// Directional check of the whole toy network: `directions` random sign
/// vectors per parameter tensor and for the input clip.
pub fn toy_model_gradcheck(mode: Mode, directions: usize) -> GradCheckReport {
    let cfg = ModelConfig::toy();
    let mut model = build_model::<f64>(&cfg, 11).unwrap();
    super::perturb_store(&mut model.params, 12);
    let mut r = rng(13);
    let video = randn(&[2, 3, 4, 32, 32], &mut r);
    let labels = [1usize, 3];
    let mut points = model.params.tensors().to_vec();
    points.push(video);
    let np = model.params.len();
    GradCheck::default()
        .run_directional(
            |tape, vars| {
                let out = model.forward_tape(tape, &vars[..np], vars[np], mode)?;
                tape.cross_entropy(out.logits, &labels)
            },
            &points,
            directions,
        )
        .unwrap()
}

#[derive(Clone, Debug)]
pub struct IdentityReport {
    /// Every variant, both modes, block with zeroed BN scales.
    pub zeroed_block_exact: bool,
    pub squeeze_roundtrip_exact: bool,
    pub detection_roundtrip_exact: bool,
    /// Relative gap between a clip inferred alone and inside a batch of 3.
    pub batch_gap: f64,
}

pub fn identity_suite(cases: u64) -> IdentityReport {
    use squeezetime::model::{
        detection_reshape, detection_unreshape, squeeze_time, unsqueeze_time, BlockConfig, CtlBlock, Ctx,
        ParamBuilder, ParamKind, Variant,
    };

    let mut zeroed_block_exact = true;
    for variant in Variant::ALL {
        let bc = BlockConfig {
            reduction: 0.25,
            temporal_channels: 4,
            wcm_reduction: 1,
            variant,
        };
        let mut b = ParamBuilder::<f64>::new(41);
        let blk = CtlBlock::build(&mut b, "blk".into(), 32, 32, 1, &bc).unwrap();
        let mut store = b.finish();
        for i in 0..store.len() {
            if store.kind(i) == ParamKind::BnGamma {
                store.tensor_mut(i).fill(0.0);
            }
        }
        let x = randn(&[2, 32, 8, 8], &mut rng(43));
        for mode in [Mode::Infer, Mode::Train] {
            let mut tape = Tape::new();
            let params = store.leaves(&mut tape);
            let xv = tape.leaf(x.clone());
            let mut cx = Ctx::new(&mut tape, &params, &store, mode);
            let y = blk.forward(&mut cx, xv).unwrap();
            zeroed_block_exact &= tape.value(y) == &x;
        }
    }

    let mut r = rng(44);
    let (mut squeeze_ok, mut detect_ok) = (true, true);
    for _ in 0..cases {
        let (t, h, w) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5));
        let x = Tensor::<f32>::randn(vec![3, t, h, w], 1.0, &mut r).unwrap();
        squeeze_ok &= unsqueeze_time(squeeze_time(x.clone()).unwrap(), t).unwrap() == x;
        let g = r.gen_range(1..5);
        let f = Tensor::<f32>::randn(vec![g * t, h, w], 1.0, &mut r).unwrap();
        detect_ok &= detection_unreshape(detection_reshape(f.clone(), t).unwrap()).unwrap() == f;
    }

    let cfg = ModelConfig::toy();
    let m = build_model::<f32>(&cfg, 60).unwrap();
    let batch = Tensor::<f32>::randn(vec![3, 3, 4, 32, 32], 1.0, &mut rng(62)).unwrap();
    let all = m.infer(&batch).unwrap();
    let mut batch_gap = 0.0f64;
    for i in 0..3 {
        let clip = Tensor::new(vec![3, 4, 32, 32], batch.data()[i * 3 * 4 * 32 * 32..][..3 * 4 * 32 * 32].to_vec()).unwrap();
        let alone = m.infer(&clip).unwrap();
        let row = &all.data()[i * cfg.num_classes..][..cfg.num_classes];
        let scale = alone.max_abs() as f64;
        for (a, b) in alone.data().iter().zip(row) {
            batch_gap = batch_gap.max((a - b).abs() as f64 / scale);
        }
    }
    IdentityReport {
        zeroed_block_exact,
        squeeze_roundtrip_exact: squeeze_ok,
        detection_roundtrip_exact: detect_ok,
        batch_gap,
    }
}
