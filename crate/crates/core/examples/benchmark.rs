//! Forward latency of the toy network at batch 1 and 8, and the
//! single-layer 3D convolution baseline.

use squeezetime::bench::{baseline3d_compare, bench_forward};
use squeezetime::model::build_model;
use squeezetime::ops::Mode;
use squeezetime::RunConfig;

fn main() -> squeezetime::Result<()> {
    let threads: usize = std::env::args().nth(1).map_or(Ok(1), |s| s.parse()).unwrap_or(1);
    let run = RunConfig::toy();
    let mut model = build_model::<f32>(&run.model, 0)?;
    model.set_mode(Mode::Infer);
    for batch in [1, 8] {
        let r = bench_forward(&model, batch, 2, 10, threads)?;
        println!(
            "batch {batch}: median {:.2} ms, p95 {:.2} ms, {:.1} clips/s",
            r.median * 1e3,
            r.p95 * 1e3,
            r.throughput
        );
    }

    for (k, t) in [(1, 1), (3, 8), (3, 16)] {
        let r = baseline3d_compare(8, k, t, (16, 16), 5)?;
        println!(
            "k={k} T={t}: analytic 3D/squeezed {:.0}x, measured {:.1}x",
            r.ratio, r.measured_ratio
        );
    }
    println!("{} threads={}", squeezetime::bench::EnvStamp::current(threads).platform, threads);
    Ok(())
}
