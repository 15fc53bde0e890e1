//! SGD with momentum under a linear-warmup cosine schedule, the
//! deterministic training loop and its checkpoints.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::config::parse;
use crate::model::{build_model, Model, ModelConfig};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults for the synthetic direction task.
    fn default() -> Self {
        Self {
            lr0: 0.1,
            warmup_epochs: 3,
            epochs: 30,
            weight_decay: 7e-5,
            momentum: 0.9,
            batch_size: 16,
            seed: 3,
        }
    }
}

impl TrainConfig {
    /// Large-scale recipe: 100 epochs, 8 warmup epochs, lr 0.015, batch 512.
    pub fn full() -> Self {
        Self {
            lr0: 0.015,
            warmup_epochs: 8,
            epochs: 100,
            batch_size: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("train.lr0 must be positive".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config("train.warmup_epochs must be below train.epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        Ok(())
    }

    /// Applies one setting; `key` is given without the `train.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr0" | "lr" => self.lr0 = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key train.{key}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "train.lr0={}\ntrain.warmup_epochs={}\ntrain.epochs={}\ntrain.weight_decay={}\n\
             train.momentum={}\ntrain.batch_size={}\ntrain.seed={}\n",
            self.lr0, self.warmup_epochs, self.epochs, self.weight_decay, self.momentum, self.batch_size, self.seed
        )
    }
}

/// Learning rate of `epoch`: `lr0·(epoch+1)/W` during warmup, then a cosine
/// decay from `lr0` at `W` to 0 at `E`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (w, e) = (cfg.warmup_epochs, cfg.epochs);
    if epoch < w {
        return cfg.lr0 * (epoch + 1) as f64 / w as f64;
    }
    if e <= w {
        return cfg.lr0;
    }
    let progress = (epoch.min(e) - w) as f64 / (e - w) as f64;
    cfg.lr0 * 0.5 * (1.0 + (PI * progress).cos())
}

/// `v ← momentum·v + g + wd·p` (decay only where `decays[i]`), `p ← p − lr·v`.
/// Non-finite gradients reject the whole step before anything changes.
pub fn sgd_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    buffers: &mut [Tensor<S>],
    decays: &[bool],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || buffers.len() != n || decays.len() != n {
        return Err(Error::Invalid("sgd_step: params, grads, buffers and decay flags differ in length".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != buffers[i].shape() {
            return Err(Error::shape("sgd_step", format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if let Some(j) = g.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter {i}"),
                index: j,
            });
        }
    }
    let (mu, lr) = (S::from_f64(cfg.momentum), S::from_f64(lr));
    for i in 0..n {
        let wd = S::from_f64(if decays[i] { cfg.weight_decay } else { 0.0 });
        let v = buffers[i].data_mut();
        let p = params[i].data_mut();
        for ((vj, pj), &gj) in v.iter_mut().zip(p.iter_mut()).zip(grads[i].data()) {
            *vj = mu * *vj + gj + wd * *pj;
            *pj = *pj - lr * *vj;
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Training top-1 accuracy over the epoch.
    pub top1: f64,
}

/// Single-owner training state.
pub struct Trainer {
    pub run: RunConfig,
    pub model: Model<f32>,
    pub momentum: Vec<Tensor<f32>>,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let mut model = build_model::<f32>(&run.model, run.train.seed)?;
        model.set_mode(Mode::Train);
        let momentum = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
        rng.set_stream(1);
        Ok(Self {
            run,
            model,
            momentum,
            epoch: 0,
            history: Vec::new(),
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.run.clone())?;
        ckpt.restore_params(&mut t.model.params)?;
        if ckpt.momentum.len() != t.momentum.len() {
            return Err(Error::format("SQZT", "momentum buffer count differs from the model"));
        }
        for (dst, src) in t.momentum.iter_mut().zip(ckpt.momentum) {
            if dst.shape() != src.shape() {
                return Err(Error::format("SQZT", "momentum buffer shape differs from the model"));
            }
            *dst = src;
        }
        t.epoch = ckpt.epoch;
        t.history = ckpt.history;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.run, &self.model.params, &self.momentum, self.epoch, RngState::capture(&self.rng), &self.history)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.run.train.epochs
    }

    /// Input clip for one training sample: random offset inside the video,
    /// center crop to the model resolution, optional flip and frame shuffle.
    fn training_clip(&mut self, record: &data::VideoRecord) -> Result<(Tensor<f32>, usize)> {
        let cfg = &self.run;
        let frames = cfg.model.frames;
        let off = self.rng.gen_range(0..=data::max_offset(record.length(), frames, cfg.data.interval));
        let clip = data::sample_clip(record, frames, cfg.data.interval, off)?;
        let (h, w) = cfg.model.input_resolution;
        let (y, x) = data::crop_origins(record.resolution(), (h, w), 1)?[0];
        let mut clip = data::crop(&clip, y, x, h, w)?;
        let mut label = record.label;
        if cfg.data.flip && self.rng.gen_bool(0.5) {
            clip = data::hflip(&clip);
            label = data::mirror_label(label);
        }
        if cfg.data.shuffle_frames {
            clip = data::shuffle_frames(&clip, &mut self.rng)?;
        }
        Ok((clip, label))
    }

    /// Runs one epoch over `data` in a seeded random order.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let lr = lr_schedule(self.epoch, &self.run.train);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let decays: Vec<bool> = (0..self.model.params.len()).map(|i| self.model.params.kind(i).decays()).collect();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(self.run.train.batch_size) {
            let mut clips = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (c, l) = self.training_clip(&data.records[i])?;
                clips.push(c);
                labels.push(l);
            }
            let batch = data::stack(&clips)?;
            let mut tape = Tape::new();
            let params = self.model.params.leaves(&mut tape);
            let input = tape.leaf(batch);
            let out = self.model.forward_tape(&mut tape, &params, input, Mode::Train)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(self.diverged(format!("loss {value}")));
            }
            loss_sum += value * chunk.len() as f64;
            correct += argmax_rows(tape.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = params.iter().map(|&v| grads.take(v)).collect();
            sgd_step(self.model.params.tensors_mut(), &grads, &mut self.momentum, &decays, lr, &self.run.train)
                .map_err(|e| self.diverged(e.to_string()))?;
            self.model.params.update_running(&tape, &out.bn_records)?;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            top1: correct as f64 / data.len() as f64,
        };
        self.history.push(stats);
        self.epoch += 1;
        Ok(stats)
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            detail,
            last_good: self.checkpoint_dir().map(|d| checkpoint_path(&d, self.epoch)).filter(|p| p.exists()),
        }
    }

    fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.run.checkpoint_dir.clone()
    }

    /// Trains until `until` epochs (capped at the configured total) are done,
    /// writing a checkpoint after every epoch when a directory is configured.
    pub fn train_until(&mut self, data: &Dataset, until: usize) -> Result<()> {
        let until = until.min(self.run.train.epochs);
        while self.epoch < until {
            self.run_epoch(data)?;
            if let Some(dir) = self.checkpoint_dir() {
                std::fs::create_dir_all(&dir)?;
                self.checkpoint().save(&checkpoint_path(&dir, self.epoch))?;
            }
        }
        Ok(())
    }

    /// Final model in infer mode.
    pub fn into_model(mut self) -> Model<f32> {
        self.model.set_mode(Mode::Infer);
        self.model
    }
}

/// `dir/epoch_{epoch:04}.sqzt`: state after `epoch` completed epochs.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.sqzt"))
}

/// Full run from scratch; returns the history and the final model.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<(Vec<EpochStats>, Model<f32>)> {
    let mut t = Trainer::new(run.clone())?;
    t.train_until(data, run.train.epochs)?;
    Ok((t.history.clone(), t.into_model()))
}

/// Index of the largest entry of every row; ties go to the lowest index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(c)
        .map(|row| (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best }))
        .collect()
}

/// Single-frame copy of `cfg` for the temporally blind control.
pub fn single_frame_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        frames: 1,
        temporal_channels: 1,
        ..cfg.clone()
    }
}
