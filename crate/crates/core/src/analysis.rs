//! Parameter and FLOPs accounting over built models, and the closed-form
//! per-layer complexity of the three temporal modeling paradigms.
//!
//! Costs are per batch. Conv and linear rows count multiply-accumulates,
//! once under [`Convention::Macs`] or twice under [`Convention::Flops2x`].
//! Batch norm, activation, elementwise and pooling rows count one operation
//! per output element under either convention and are kept in separate
//! rows, so both the inclusive total and the conv/linear-only total can be
//! read off one report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, LayerInfo, Model, ModelConfig};
use crate::tensor::Scalar;

/// How a multiply-accumulate is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    Macs,
    Flops2x,
}

impl Convention {
    /// Calibrated once against the default model (see [`calibrate`]); every
    /// table comparison uses it.
    pub const CANONICAL: Convention = Convention::Macs;

    pub fn name(self) -> &'static str {
        match self {
            Convention::Macs => "macs",
            Convention::Flops2x => "flops2x",
        }
    }

    fn mac_factor(self) -> u64 {
        match self {
            Convention::Macs => 1,
            Convention::Flops2x => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    /// Every row.
    pub flops: u64,
    /// Conv and linear rows only; the figure compared with published tables.
    pub mac_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub convention: Convention,
    pub input_shape: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    /// Builds a report from per-sample trace rows scaled to `batch` samples.
    pub fn from_trace(
        model: impl Into<String>,
        trace: &[LayerInfo],
        batch: usize,
        input_shape: Vec<usize>,
        convention: Convention,
    ) -> Self {
        let rows: Vec<CostRow> = trace
            .iter()
            .map(|l| {
                let factor = if l.kind.is_mac() { convention.mac_factor() } else { 1 };
                CostRow {
                    layer: l.name.clone(),
                    kind: l.kind.name().into(),
                    params: l.params,
                    flops: l.ops * factor * batch as u64,
                    out_shape: l.out_shape.clone(),
                }
            })
            .collect();
        let totals = CostTotals {
            params: rows.iter().map(|r| r.params).sum(),
            flops: rows.iter().map(|r| r.flops).sum(),
            mac_flops: rows
                .iter()
                .zip(trace)
                .filter(|(_, l)| l.kind.is_mac())
                .map(|(r, _)| r.flops)
                .sum(),
        };
        Self {
            model: model.into(),
            convention,
            input_shape,
            rows,
            totals,
        }
    }

    pub fn params_m(&self) -> f64 {
        self.totals.params as f64 / 1e6
    }

    /// Conv/linear FLOPs in units of 1e9.
    pub fn flops_g(&self) -> f64 {
        self.totals.mac_flops as f64 / 1e9
    }
}

fn model_id<S: Scalar>(model: &Model<S>) -> String {
    let c = &model.config;
    format!("squeezetime-{}-t{}-x{}", c.variant, c.frames, c.channel_factor)
}

/// One row per named parameter tensor. Batch-norm running statistics are
/// state and are not counted.
pub fn count_params<S: Scalar>(model: &Model<S>) -> CostReport {
    let p = &model.params;
    let rows: Vec<CostRow> = (0..p.len())
        .map(|i| CostRow {
            layer: p.name(i).to_string(),
            kind: serde_json::to_value(p.kind(i))
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            params: p.tensor(i).numel() as u64,
            flops: 0,
            out_shape: p.tensor(i).shape().to_vec(),
        })
        .collect();
    CostReport {
        model: model_id(model),
        convention: Convention::CANONICAL,
        input_shape: model.config.clip_shape().to_vec(),
        totals: CostTotals {
            params: rows.iter().map(|r| r.params).sum(),
            ..CostTotals::default()
        },
        rows,
    }
}

/// Per-layer costs for `input_shape`, either one `(3, T, h, w)` clip or a
/// `(n, 3, T, h, w)` batch matching the model.
pub fn count_flops<S: Scalar>(model: &Model<S>, input_shape: &[usize], convention: Convention) -> Result<CostReport> {
    let batch = model.check_input(input_shape)?;
    Ok(CostReport::from_trace(
        model_id(model),
        &model.trace()?,
        batch,
        input_shape.to_vec(),
        convention,
    ))
}

/// Parameter and FLOPs report for one clip of a freshly built `config`.
pub fn profile(config: &ModelConfig, convention: Convention) -> Result<CostReport> {
    let model = build_model::<f32>(config, 0)?;
    let mut report = count_flops(&model, &config.clip_shape(), convention)?;
    report.totals.params = model.param_count() as u64;
    Ok(report)
}

/// Picks the convention whose conv/linear total for `config` lies within
/// `tolerance` (relative) of `target_flops`; `None` when neither does.
pub fn calibrate(config: &ModelConfig, target_flops: f64, tolerance: f64) -> Result<Option<Convention>> {
    let model = build_model::<f32>(config, 0)?;
    for conv in [Convention::Macs, Convention::Flops2x] {
        let f = count_flops(&model, &config.clip_shape(), conv)?.totals.mac_flops as f64;
        if (f - target_flops).abs() <= tolerance * target_flops {
            return Ok(Some(conv));
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Full `k×k×k` convolution over `(c, t, h, w)`.
    Conv3d,
    /// `k×k` spatial convolution per frame plus a temporal module costing `O_t`.
    Conv2dTemporal,
    /// `k×k` convolution over the squeezed frame stack.
    Squeezed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub c_in: u64,
    pub c_out: u64,
    pub k: u64,
    pub h: u64,
    pub w: u64,
    pub t: u64,
    pub o_t: u64,
}

/// Closed-form single-layer cost in FLOPs (two per multiply-accumulate).
pub fn analytic_complexity(paradigm: Paradigm, d: LayerDims) -> Result<u128> {
    if [d.c_in, d.c_out, d.k, d.h, d.w, d.t].contains(&0) {
        return Err(Error::Invalid("complexity dimensions must be positive".into()));
    }
    let base = 2 * d.c_out as u128 * d.c_in as u128 * (d.k * d.k) as u128 * (d.h * d.w) as u128;
    Ok(match paradigm {
        Paradigm::Conv3d => base * d.k as u128 * d.t as u128,
        Paradigm::Conv2dTemporal => base * d.t as u128 + d.o_t as u128,
        Paradigm::Squeezed => base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv, ParamBuilder};

    fn ones() -> LayerDims {
        LayerDims {
            c_in: 1,
            c_out: 1,
            k: 1,
            h: 1,
            w: 1,
            t: 1,
            o_t: 0,
        }
    }

    #[test]
    fn unit_dims_cost_two() {
        for p in [Paradigm::Conv3d, Paradigm::Conv2dTemporal, Paradigm::Squeezed] {
            assert_eq!(analytic_complexity(p, ones()).unwrap(), 2);
        }
        assert!(analytic_complexity(Paradigm::Squeezed, LayerDims { k: 0, ..ones() }).is_err());
    }

    #[test]
    fn single_conv_report_matches_formula() {
        let mut b = ParamBuilder::<f32>::new(0);
        let conv = Conv::build(&mut b, "c".into(), 6, 4, 3, 1, 1, false).unwrap();
        let mut rows = Vec::new();
        conv.trace([6, 5, 7], &mut rows).unwrap();
        let r = CostReport::from_trace("conv", &rows, 1, vec![6, 5, 7], Convention::Flops2x);
        let d = LayerDims {
            c_in: 6,
            c_out: 4,
            k: 3,
            h: 5,
            w: 7,
            t: 1,
            o_t: 0,
        };
        assert_eq!(r.totals.flops as u128, analytic_complexity(Paradigm::Squeezed, d).unwrap());
        assert_eq!(r.totals.params, 6 * 4 * 9);
        let m = CostReport::from_trace("conv", &rows, 1, vec![6, 5, 7], Convention::Macs);
        assert_eq!(2 * m.totals.mac_flops, r.totals.mac_flops);
    }

    #[test]
    fn linear_and_pointwise_rows() {
        let mut b = ParamBuilder::<f32>::new(0);
        let l = crate::model::Linear::build(&mut b, "fc".into(), 8, 5, true).unwrap();
        let c = Conv::build(&mut b, "pw".into(), 2, 3, 1, 1, 0, false).unwrap();
        assert_eq!(c.params(), 6);
        let mut rows = Vec::new();
        l.trace(&mut rows);
        let r = CostReport::from_trace("fc", &rows, 1, vec![8], Convention::Flops2x);
        assert_eq!(r.totals.params, 45);
        assert_eq!(r.totals.flops, 80);
    }

    #[test]
    fn toy_totals_sum_rows_and_scale_with_batch() {
        let m = build_model::<f32>(&ModelConfig::toy(), 0).unwrap();
        let one = count_flops(&m, &[3, 4, 32, 32], Convention::Macs).unwrap();
        let two = count_flops(&m, &[2, 3, 4, 32, 32], Convention::Macs).unwrap();
        assert_eq!(one.totals.flops, one.rows.iter().map(|r| r.flops).sum::<u64>());
        assert_eq!(2 * one.totals.flops, two.totals.flops);
        assert_eq!(count_params(&m).totals.params as usize, m.param_count());
        assert!(count_flops(&m, &[1, 3, 8, 32, 32], Convention::Macs).is_err());
    }
}
