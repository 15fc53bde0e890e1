//! The `squeezetime` command line.
//!
//! Exit codes: 0 on success, 2 on a usage or configuration error, 1 on a
//! runtime failure. Machine-readable output goes to the `--out` path, a
//! short summary to standard output.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{count_flops, profile, Convention};
use crate::bench::{baseline3d_compare, bench_forward};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, read_sqvd, write_sqvd, Dataset};
use crate::error::{Error, Result};
use crate::eval::evaluate_multiview;
use crate::gradcheck::model_gradcheck;
use crate::model::{build_model, ModelConfig};
use crate::ops::Mode;
use crate::report::{emit_report, Format, Report, SweepRow};
use crate::train::Trainer;

#[derive(Parser, Debug)]
#[command(name = "squeezetime", version, about = "SqueezeTime video networks: cost accounting, training and benchmarks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key=value` config file; without one the subcommand's default is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for training and data; wins over SQZT_SEED and the file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic direction dataset to an SQVD file.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the synthetic task; writes history, checkpoints and a test evaluation.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// SQVD training set; rendered from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with multi-view testing.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// SQVD test set; rendered from the checkpoint's config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Shuffle the frames of every view with this seed.
        #[arg(long)]
        shuffle_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and FLOPs report.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value_t = ConventionArg::Macs)]
        convention: ConventionArg,
        #[arg(long)]
        out: PathBuf,
        /// Output format; taken from the extension when absent.
        #[arg(long)]
        format: Option<Format>,
    },
    /// Directional gradient check of a network against finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        directions: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward latency of a network, or the single-layer 3D baseline.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Compare one 3D conv layer with its squeezed 2D counterpart instead.
        #[arg(long)]
        baseline3d: bool,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameters and FLOPs along one config axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ConventionArg {
    Macs,
    Flops2x,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
enum Axis {
    Frames,
    ChannelFactor,
    Variant,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::Frames => "frames",
            Axis::ChannelFactor => "channel_factor",
            Axis::Variant => "variant",
        }
    }
}

impl ConfigArgs {
    /// `fallback`, or the file over the full-size defaults, then overrides and seed.
    fn load(&self, fallback: RunConfig) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => fallback,
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            run.set(k, v)?;
        }
        run.resolve_seed(self.seed)?;
        run.validate()?;
        Ok(run)
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn format_for(path: &Path, explicit: Option<Format>) -> Format {
    explicit.unwrap_or_else(|| Format::from_path(path))
}

fn load_or_render(path: Option<&Path>, render: impl FnOnce() -> Result<Dataset>) -> Result<Dataset> {
    match path {
        Some(p) => read_sqvd(p),
        None => render(),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Datagen { cfg, split, out } => {
            let run = cfg.load(RunConfig::toy())?;
            let spec = match split {
                Split::Train => run.data.train_spec(),
                Split::Test => run.data.test_spec(),
            };
            let ds = generate_dataset(&spec)?;
            write_sqvd(&ds, &out)?;
            println!("wrote {} videos of {} frames at {}x{} to {}", ds.len(), spec.length, spec.resolution.0, spec.resolution.1, out.display());
        }
        Command::Train { cfg, out_dir, data, resume } => {
            std::fs::create_dir_all(&out_dir)?;
            let mut trainer = match &resume {
                Some(p) => {
                    let mut t = Trainer::from_checkpoint(Checkpoint::load(p)?)?;
                    if let Some(seed) = cfg.seed {
                        return Err(Error::Config(format!("--seed {seed} cannot change a resumed run")));
                    }
                    t.run.checkpoint_dir = None;
                    t
                }
                None => Trainer::new(cfg.load(RunConfig::toy())?)?,
            };
            trainer.run.checkpoint_dir = Some(out_dir.join("checkpoints"));
            let run = trainer.run.clone();
            let train_set = load_or_render(data.as_deref(), || generate_dataset(&run.data.train_spec()))?;
            std::fs::write(out_dir.join("run.cfg"), run.to_kv())?;
            while !trainer.finished() {
                let next = trainer.epoch + 1;
                trainer.train_until(&train_set, next)?;
                let s = trainer.history.last().expect("one epoch ran");
                println!("epoch {:>3}  lr {:.5}  loss {:.4}  top1 {:.3}", s.epoch, s.lr, s.loss, s.top1);
            }
            emit_report(&Report::History(&trainer.history), Format::Csv, &out_dir.join("history.csv"))?;
            trainer.checkpoint().save(&out_dir.join("final.sqzt"))?;
            let model = trainer.into_model();
            let test_set = generate_dataset(&run.data.test_spec())?;
            let shuffle = run.data.shuffle_frames.then_some(run.train.seed);
            let views = run.data.views(run.model.frames, run.model.input_resolution);
            let res = evaluate_multiview(&model, &test_set, &views, shuffle)?;
            emit_report(&Report::Eval(&res), Format::Json, &out_dir.join("eval.json"))?;
            println!("test top1 {:.4} over {} videos; outputs in {}", res.top1, res.samples, out_dir.display());
        }
        Command::Eval { checkpoint, data, shuffle_seed, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let run = ckpt.run.clone();
            let mut model = build_model::<f32>(&run.model, run.train.seed)?;
            ckpt.restore_params(&mut model.params)?;
            model.set_mode(Mode::Infer);
            let test_set = load_or_render(data.as_deref(), || generate_dataset(&run.data.test_spec()))?;
            let shuffle = shuffle_seed.or(run.data.shuffle_frames.then_some(run.train.seed));
            let views = run.data.views(run.model.frames, run.model.input_resolution);
            let res = evaluate_multiview(&model, &test_set, &views, shuffle)?;
            emit_report(&Report::Eval(&res), format_for(&out, None), &out)?;
            println!("top1 {:.4}  top5 {:.4}  over {} videos", res.top1, res.top5, res.samples);
        }
        Command::Count { cfg, convention, out, format } => {
            let run = cfg.load(RunConfig::default())?;
            let convention = match convention {
                ConventionArg::Macs => Convention::Macs,
                ConventionArg::Flops2x => Convention::Flops2x,
            };
            let model = build_model::<f32>(&run.model, 0)?;
            let mut report = count_flops(&model, &run.model.clip_shape(), convention)?;
            report.totals.params = model.param_count() as u64;
            emit_report(&Report::Cost(&report), format_for(&out, format), &out)?;
            println!(
                "{}: {:.2}M params, {:.2}G FLOPs ({}, conv/linear) per clip {:?}",
                report.model,
                report.params_m(),
                report.flops_g(),
                convention.name(),
                report.input_shape
            );
        }
        Command::Gradcheck { cfg, directions, batch, tolerance, out } => {
            let run = cfg.load(RunConfig::toy())?;
            let mut checks = Vec::new();
            for mode in [Mode::Infer, Mode::Train] {
                let r = model_gradcheck(&run.model, run.train.seed, batch, mode, directions)?;
                println!("{mode:?}: max rel error {:.3e} over {} directions", r.max_rel_error, r.checked);
                checks.push((format!("model_{mode:?}").to_lowercase(), r));
            }
            if let Some(out) = &out {
                emit_report(&Report::GradCheck(&checks), format_for(out, None), out)?;
            }
            // Batch statistics make the train-mode check noisier; only infer mode gates.
            if !checks[0].1.passes(tolerance) {
                return Err(Error::Invalid(format!("gradient check exceeded {tolerance:e}")));
            }
        }
        Command::Bench { cfg, batch, warmup, reps, threads, baseline3d, channels, kernel, frames, size, out } => {
            if baseline3d {
                let r = baseline3d_compare(channels, kernel, frames, (size, size), reps)?;
                emit_report(&Report::Baseline3d(&r), format_for(&out, None), &out)?;
                println!(
                    "3D/squeezed: analytic {:.4}x, measured {:.2}x ({:.3e}s vs {:.3e}s) on {}",
                    r.ratio, r.measured_ratio, r.time_3d, r.time_squeezed, r.env.platform
                );
            } else {
                let run = cfg.load(RunConfig::toy())?;
                let mut model = build_model::<f32>(&run.model, run.train.seed)?;
                model.set_mode(Mode::Infer);
                let r = bench_forward(&model, batch, warmup, reps, threads)?;
                emit_report(&Report::Bench(&r), format_for(&out, None), &out)?;
                println!(
                    "{} batch {}: median {:.3e}s, p95 {:.3e}s, {:.2} clips/s ({} threads)",
                    r.model, r.batch, r.median, r.p95, r.throughput, r.env.threads
                );
            }
        }
        Command::Sweep { cfg, axis, values, out } => {
            let run = cfg.load(RunConfig::default())?;
            let rows = sweep(&run.model, axis.key(), &values)?;
            emit_report(&Report::Sweep(&rows), format_for(&out, None), &out)?;
            for r in &rows {
                println!("{}={:<6} {:>8.2}M {:>8.2}G", r.axis, r.value, r.params as f64 / 1e6, r.flops as f64 / 1e9);
            }
        }
    }
    Ok(())
}

/// Canonical parameter and FLOPs counts of `base` with `model.<axis>` set to
/// each value in turn.
pub fn sweep(base: &ModelConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(axis, v)?;
            cfg.validate()?;
            Ok(SweepRow::from_report(axis, v.trim(), &profile(&cfg, Convention::CANONICAL)?))
        })
        .collect()
}
