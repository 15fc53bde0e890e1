//! CSV and JSON emission for cost reports, benchmark results, sweeps and
//! training histories.
//!
//! Every JSON document carries `schema_version`. Floats are rounded to six
//! significant digits before they are written, in both formats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::CostReport;
use crate::bench::{Baseline3dResult, BenchResult};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::gradcheck::GradCheckReport;
use crate::train::EpochStats;

pub const SCHEMA_VERSION: u32 = 1;

pub const COST_HEADER: [&str; 5] = ["layer", "kind", "params", "flops", "out_shape"];
pub const HISTORY_HEADER: [&str; 4] = ["epoch", "lr", "loss", "top1"];
pub const SWEEP_HEADER: [&str; 6] = ["axis", "value", "params", "flops", "params_m", "flops_g"];
pub const BENCH_HEADER: [&str; 10] = [
    "model", "batch", "warmup", "reps", "median_s", "p95_s", "throughput", "platform", "threads", "times_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// From a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format {s:?} (csv or json)"))),
        }
    }
}

/// One point of a parameter/FLOPs sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub params: u64,
    /// Conv/linear FLOPs under the canonical convention.
    pub flops: u64,
}

impl SweepRow {
    pub fn from_report(axis: &str, value: &str, report: &CostReport) -> Self {
        Self {
            axis: axis.into(),
            value: value.into(),
            params: report.totals.params,
            flops: report.totals.mac_flops,
        }
    }
}

pub enum Report<'a> {
    Cost(&'a CostReport),
    Bench(&'a BenchResult),
    Baseline3d(&'a Baseline3dResult),
    Sweep(&'a [SweepRow]),
    History(&'a [EpochStats]),
    Eval(&'a EvalResult),
    GradCheck(&'a [(String, GradCheckReport)]),
}

/// `x` rounded to six significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(sig6(x)).map_or(Value::Null, Value::Number)
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn text(x: f64) -> String {
    sig6(x).to_string()
}

impl Report<'_> {
    pub fn to_json(&self) -> Value {
        let body = match self {
            Report::Cost(r) => json!({
                "kind": "cost_report",
                "model": r.model,
                "convention": r.convention.name(),
                "input_shape": r.input_shape,
                "totals": {
                    "params": r.totals.params,
                    "flops": r.totals.flops,
                    "mac_flops": r.totals.mac_flops,
                    "params_m": num(r.params_m()),
                    "flops_g": num(r.flops_g()),
                },
                "rows": r.rows.iter().map(|row| json!({
                    "layer": row.layer,
                    "kind": row.kind,
                    "params": row.params,
                    "flops": row.flops,
                    "out_shape": row.out_shape,
                })).collect::<Vec<_>>(),
            }),
            Report::Bench(b) => json!({
                "kind": "bench_result",
                "model": b.model,
                "batch": b.batch,
                "warmup": b.warmup,
                "reps": b.reps,
                "times_s": b.times.iter().map(|&t| num(t)).collect::<Vec<_>>(),
                "median_s": num(b.median),
                "p95_s": num(b.p95),
                "throughput": num(b.throughput),
                "env": {"platform": b.env.platform, "threads": b.env.threads},
            }),
            Report::Baseline3d(b) => json!({
                "kind": "baseline3d_compare",
                "dims": b.dims,
                "flops_3d": b.flops_3d.to_string(),
                "flops_squeezed": b.flops_squeezed.to_string(),
                "ratio": num(b.ratio),
                "time_3d_s": num(b.time_3d),
                "time_squeezed_s": num(b.time_squeezed),
                "measured_ratio": num(b.measured_ratio),
                "env": {"platform": b.env.platform, "threads": b.env.threads},
            }),
            Report::Sweep(rows) => json!({
                "kind": "sweep",
                "rows": rows.iter().map(|r| json!({
                    "axis": r.axis,
                    "value": r.value,
                    "params": r.params,
                    "flops": r.flops,
                    "params_m": num(r.params as f64 / 1e6),
                    "flops_g": num(r.flops as f64 / 1e9),
                })).collect::<Vec<_>>(),
            }),
            Report::History(h) => json!({
                "kind": "history",
                "history": h.iter().map(|e| json!({
                    "epoch": e.epoch,
                    "lr": num(e.lr),
                    "loss": num(e.loss),
                    "top1": num(e.top1),
                })).collect::<Vec<_>>(),
            }),
            Report::Eval(e) => json!({
                "kind": "eval_result",
                "top1": num(e.top1),
                "top5": num(e.top5),
                "per_class": e.per_class.iter().map(|&v| num(v)).collect::<Vec<_>>(),
                "samples": e.samples,
            }),
            Report::GradCheck(checks) => json!({
                "kind": "gradcheck",
                "checks": checks.iter().map(|(name, r)| json!({
                    "name": name,
                    "max_rel_error": num(r.max_rel_error),
                    "checked": r.checked,
                    "skipped_kinks": r.skipped_kinks,
                })).collect::<Vec<_>>(),
            }),
        };
        let mut doc = json!({ "schema_version": SCHEMA_VERSION });
        doc.as_object_mut()
            .expect("object")
            .extend(body.as_object().expect("object").clone());
        doc
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self {
            Report::Cost(r) => {
                w.write_record(COST_HEADER)?;
                for row in &r.rows {
                    w.write_record([
                        row.layer.clone(),
                        row.kind.clone(),
                        row.params.to_string(),
                        row.flops.to_string(),
                        shape_str(&row.out_shape),
                    ])?;
                }
            }
            Report::Bench(b) => {
                w.write_record(BENCH_HEADER)?;
                w.write_record([
                    b.model.clone(),
                    b.batch.to_string(),
                    b.warmup.to_string(),
                    b.reps.to_string(),
                    text(b.median),
                    text(b.p95),
                    text(b.throughput),
                    b.env.platform.clone(),
                    b.env.threads.to_string(),
                    b.times.iter().map(|&t| text(t)).collect::<Vec<_>>().join(";"),
                ])?;
            }
            Report::Baseline3d(b) => {
                w.write_record([
                    "flops_3d", "flops_squeezed", "ratio", "time_3d_s", "time_squeezed_s", "measured_ratio", "platform",
                    "threads",
                ])?;
                w.write_record([
                    b.flops_3d.to_string(),
                    b.flops_squeezed.to_string(),
                    text(b.ratio),
                    text(b.time_3d),
                    text(b.time_squeezed),
                    text(b.measured_ratio),
                    b.env.platform.clone(),
                    b.env.threads.to_string(),
                ])?;
            }
            Report::Sweep(rows) => {
                w.write_record(SWEEP_HEADER)?;
                for r in rows.iter() {
                    w.write_record([
                        r.axis.clone(),
                        r.value.clone(),
                        r.params.to_string(),
                        r.flops.to_string(),
                        text(r.params as f64 / 1e6),
                        text(r.flops as f64 / 1e9),
                    ])?;
                }
            }
            Report::History(h) => {
                w.write_record(HISTORY_HEADER)?;
                for e in h.iter() {
                    w.write_record([e.epoch.to_string(), text(e.lr), text(e.loss), text(e.top1)])?;
                }
            }
            Report::Eval(e) => {
                w.write_record(["top1", "top5", "samples"])?;
                w.write_record([text(e.top1), text(e.top5), e.samples.to_string()])?;
            }
            Report::GradCheck(checks) => {
                w.write_record(["name", "max_rel_error", "checked", "skipped_kinks"])?;
                for (name, r) in checks.iter() {
                    w.write_record([
                        name.clone(),
                        text(r.max_rel_error),
                        r.checked.to_string(),
                        r.skipped_kinks.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }
}

/// Writes `report` to `path` in `format`.
pub fn emit_report(report: &Report<'_>, format: Format, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => report.write_csv(&mut out)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &report.to_json())?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(5_531_234_567.0), 5_531_230_000.0);
        assert_eq!(sig6(0.000_123_456_78), 0.000_123_457);
        assert_eq!(sig6(-2.0), -2.0);
        assert_eq!(sig6(0.0), 0.0);
    }

    #[test]
    fn empty_history_is_header_only() {
        let csv = Report::History(&[]).to_csv_string().unwrap();
        assert_eq!(csv, "epoch,lr,loss,top1\n");
        let j = Report::History(&[]).to_json();
        assert_eq!(j["schema_version"], SCHEMA_VERSION);
        assert_eq!(j["history"], json!([]));
    }
}
