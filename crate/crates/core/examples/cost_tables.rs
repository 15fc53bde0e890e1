//! Parameter and FLOPs counts of the full-size network, its branch
//! variants and the frame and width sweeps.

use squeezetime::analysis::{profile, Convention};
use squeezetime::model::{ModelConfig, Variant};

fn row(label: &str, cfg: &ModelConfig) -> squeezetime::Result<()> {
    let r = profile(cfg, Convention::CANONICAL)?;
    println!("{label:<22} {:>8.2}M {:>8.2}G", r.params_m(), r.flops_g());
    Ok(())
}

fn main() -> squeezetime::Result<()> {
    let base = ModelConfig::default();
    println!("{:<22} {:>9} {:>9}", "config", "params", "flops");
    for v in Variant::ALL {
        row(&format!("variant={v}"), &ModelConfig { variant: v, ..base.clone() })?;
    }
    for t in [4, 8, 16, 32] {
        row(&format!("frames={t}"), &ModelConfig { frames: t, ..base.clone() })?;
    }
    for c in [0.5, 0.75, 1.0, 1.25] {
        row(&format!("channel_factor={c}"), &ModelConfig { channel_factor: c, ..base.clone() })?;
    }

    // The ten most expensive layers of the default network.
    let report = profile(&base, Convention::CANONICAL)?;
    let mut rows = report.rows.clone();
    rows.sort_by_key(|r| std::cmp::Reverse(r.flops));
    println!();
    for r in rows.iter().take(10) {
        println!("{:<36} {:<10} {:>12} {:?}", r.layer, r.kind, r.flops, r.out_shape);
    }
    Ok(())
}
