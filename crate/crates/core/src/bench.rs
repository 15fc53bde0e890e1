//! Forward-pass latency measurement and the single-layer 3D convolution
//! baseline.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{analytic_complexity, LayerDims, Paradigm};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{conv2d, conv3d, ConvParams};
use crate::tensor::Tensor;

/// Where a measurement was taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvStamp {
    pub platform: String,
    pub threads: usize,
}

impl EnvStamp {
    pub fn current(threads: usize) -> Self {
        let cpus = std::thread::available_parallelism().map_or(0, |n| n.get());
        Self {
            platform: format!(
                "{}-{} cpus={cpus} squeezetime={}",
                std::env::consts::OS,
                std::env::consts::ARCH,
                env!("CARGO_PKG_VERSION")
            ),
            threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Wall time of every measured rep, seconds.
    pub times: Vec<f64>,
    pub median: f64,
    pub p95: f64,
    /// Clips per second at the median.
    pub throughput: f64,
    pub env: EnvStamp,
}

/// Median (mean of the middle pair for even counts) and nearest-rank 95th
/// percentile.
pub fn median_p95(times: &[f64]) -> (f64, f64) {
    let mut s = times.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, s[rank - 1])
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::Invalid("thread count must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))
}

/// Times `reps` (after `warmup` untimed) inference passes of a seeded
/// uniform batch on a pool of `threads` workers.
pub fn bench_forward(model: &Model<f32>, batch: usize, warmup: usize, reps: usize, threads: usize) -> Result<BenchResult> {
    if reps == 0 || batch == 0 {
        return Err(Error::Invalid("bench needs reps >= 1 and batch >= 1".into()));
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(&model.config.clip_shape());
    let input = Tensor::<f32>::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let times = pool(threads)?.install(|| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            model.infer(&input)?;
        }
        (0..reps)
            .map(|_| {
                let t0 = Instant::now();
                model.infer(&input)?;
                Ok(t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE))
            })
            .collect()
    })?;
    let (median, p95) = median_p95(&times);
    let c = &model.config;
    Ok(BenchResult {
        model: format!("squeezetime-{}-t{}-x{}", c.variant, c.frames, c.channel_factor),
        batch,
        warmup,
        reps,
        times,
        median,
        p95,
        throughput: batch as f64 / median,
        env: EnvStamp::current(threads),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline3dResult {
    pub dims: LayerDims,
    pub flops_3d: u128,
    pub flops_squeezed: u128,
    /// `flops_3d / flops_squeezed`.
    pub ratio: f64,
    /// Median seconds of the 3D layer and of the squeezed layer.
    pub time_3d: f64,
    pub time_squeezed: f64,
    pub measured_ratio: f64,
    pub env: EnvStamp,
}

/// One `k×k×k` convolution over a `(c, t, h, w)` volume against one `k×k`
/// convolution with the same channel counts over the `(c, h, w)` squeezed
/// map. Both keep their spatial (and temporal) extent.
pub fn baseline3d_compare(c: usize, k: usize, t: usize, hw: (usize, usize), reps: usize) -> Result<Baseline3dResult> {
    if k % 2 == 0 || reps == 0 {
        return Err(Error::Invalid("baseline needs an odd kernel and reps >= 1".into()));
    }
    let dims = LayerDims {
        c_in: c as u64,
        c_out: c as u64,
        k: k as u64,
        h: hw.0 as u64,
        w: hw.1 as u64,
        t: t as u64,
        o_t: 0,
    };
    let flops_3d = analytic_complexity(Paradigm::Conv3d, dims)?;
    let flops_squeezed = analytic_complexity(Paradigm::Squeezed, dims)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let volume = Tensor::<f32>::uniform(vec![c, t, hw.0, hw.1], -1.0, 1.0, &mut rng)?;
    let kernel3 = Tensor::<f32>::uniform(vec![c, c, k, k, k], -1.0, 1.0, &mut rng)?;
    let plane = Tensor::<f32>::uniform(vec![c, hw.0, hw.1], -1.0, 1.0, &mut rng)?;
    let kernel2 = ConvParams::new(Tensor::uniform(vec![c, c, k, k], -1.0, 1.0, &mut rng)?, None, 1, k / 2);

    // Each sample repeats the call until it spans a few milliseconds, so
    // microsecond layers are not dominated by timer and scheduler noise.
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let t0 = Instant::now();
        f()?;
        let once = t0.elapsed().as_secs_f64().max(1e-9);
        let inner = ((2e-3 / once).ceil() as usize).clamp(1, 10_000);
        let times = (0..reps)
            .map(|_| {
                let t0 = Instant::now();
                for _ in 0..inner {
                    f()?;
                }
                Ok(t0.elapsed().as_secs_f64() / inner as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(median_p95(&times).0.max(f64::MIN_POSITIVE))
    };
    let (time_3d, time_squeezed) = pool(1)?.install(|| -> Result<(f64, f64)> {
        Ok((
            time(&|| conv3d(&volume, &kernel3, k / 2).map(drop))?,
            time(&|| conv2d(&plane, &kernel2).map(drop))?,
        ))
    })?;
    Ok(Baseline3dResult {
        dims,
        flops_3d,
        flops_squeezed,
        ratio: flops_3d as f64 / flops_squeezed as f64,
        time_3d,
        time_squeezed,
        measured_ratio: time_3d / time_squeezed,
        env: EnvStamp::current(1),
    })
}
