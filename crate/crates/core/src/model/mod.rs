//! The SqueezeTime network: squeeze reshape, 5×5 stem, a 2×2 stride-2
//! downsample, four stages of CTL bottleneck blocks, average pool, linear head.

pub mod adapters;
pub mod config;
pub mod layers;
pub mod params;

pub use adapters::{
    detection_reshape, detection_unreshape, sliding_window_clips, squeeze_time, unsqueeze_time, WindowMode,
};
pub use config::{ModelConfig, Variant};
pub use layers::{
    BatchNorm, BlockConfig, Conv, CtlBlock, CtlModule, Ctx, IoiBranch, LayerInfo, LayerKind, Linear, Middle, Wcm,
};
pub use params::{ParamBuilder, ParamKind, ParamStore, RunningStats};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::batchnorm::Mode;
use crate::ops::pool::PoolKind;
use crate::tensor::{Scalar, Tensor};

/// Fixed topology of a built network.
#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub down: Conv,
    pub down_bn: BatchNorm,
    pub stages: Vec<Vec<CtlBlock>>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct Model<S = f32> {
    pub config: ModelConfig,
    pub net: Network,
    pub params: ParamStore<S>,
    mode: Mode,
}

/// Tape variables produced by one forward pass.
pub struct ForwardOut {
    pub logits: Var,
    /// Last-stage feature map `(n, C, F_h, F_w)`.
    pub features: Var,
    pub bn_records: Vec<(usize, Var)>,
}

/// Builds the network with parameters drawn from `seed`; equal seeds give
/// bit-identical parameters.
pub fn build_model<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut b = ParamBuilder::<S>::new(seed);
    let stem_c = config.stem_width();
    let stem = Conv::build(&mut b, "stem.conv".into(), 3 * config.frames, stem_c, 5, 2, 2, false)?;
    let stem_bn = BatchNorm::build(&mut b, "stem.bn".into(), stem_c)?;
    let down = Conv::build(&mut b, "down.conv".into(), stem_c, stem_c, 2, 2, 0, false)?;
    let down_bn = BatchNorm::build(&mut b, "down.bn".into(), stem_c)?;
    let bc = BlockConfig::from_model(config);
    let mut prev = stem_c;
    let mut stages = Vec::with_capacity(4);
    for (i, (&blocks, &width)) in config.stage_blocks.iter().zip(&config.stage_widths()).enumerate() {
        let mut stage = Vec::with_capacity(blocks);
        for j in 0..blocks {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let name = format!("stage{}.block{j}", i + 1);
            stage.push(CtlBlock::build(&mut b, name, prev, width, stride, &bc)?);
            prev = width;
        }
        stages.push(stage);
    }
    let head = Linear::build(&mut b, "head".into(), prev, config.num_classes, true)?;
    Ok(Model {
        config: config.clone(),
        net: Network {
            stem,
            stem_bn,
            down,
            down_bn,
            stages,
            head,
        },
        params: b.finish(),
        mode: Mode::Infer,
    })
}

impl<S: Scalar> Model<S> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn blocks(&self) -> impl Iterator<Item = &CtlBlock> {
        self.net.stages.iter().flatten()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Batch size of a `(n, 3, T, h, w)` input, or 1 for a single `(3, T, h, w)` clip.
    pub fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let [_, t, h, w] = self.config.clip_shape();
        match *shape {
            [3, tt, hh, ww] if (tt, hh, ww) == (t, h, w) => Ok(1),
            [n, 3, tt, hh, ww] if (tt, hh, ww) == (t, h, w) => Ok(n),
            _ => Err(Error::shape(
                "forward",
                format!("input {shape:?} does not match (n, 3, {t}, {h}, {w})"),
            )),
        }
    }

    /// Records the forward pass of `input` (a leaf holding the batch) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<S>, params: &[Var], input: Var, mode: Mode) -> Result<ForwardOut> {
        let n = self.check_input(tape.value(input).shape())?;
        let [_, t, h, w] = self.config.clip_shape();
        let x = tape.reshape(input, vec![n, 3 * t, h, w])?;
        let mut cx = Ctx::new(tape, params, &self.params, mode);
        let net = &self.net;
        let x = net.stem.forward(&mut cx, x)?;
        let x = net.stem_bn.forward(&mut cx, x)?;
        let x = cx.tape.relu(x);
        let x = net.down.forward(&mut cx, x)?;
        let x = net.down_bn.forward(&mut cx, x)?;
        let mut x = cx.tape.relu(x);
        for block in net.stages.iter().flatten() {
            x = block.forward(&mut cx, x)?;
        }
        let features = x;
        let pooled = cx.tape.global_pool(features, PoolKind::GlobalAvg)?;
        let logits = net.head.forward(&mut cx, pooled)?;
        Ok(ForwardOut {
            logits,
            features,
            bn_records: cx.bn_records,
        })
    }

    /// Forward pass in the current mode. Train mode normalizes with batch
    /// statistics and folds them into the running estimates.
    pub fn forward(&mut self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        match self.mode {
            Mode::Infer => self.infer(batch),
            Mode::Train => {
                let mut tape = Tape::new();
                let params = self.params.leaves(&mut tape);
                let input = tape.leaf(batch.clone());
                let out = self.forward_tape(&mut tape, &params, input, Mode::Train)?;
                self.params.update_running(&tape, &out.bn_records)?;
                Ok(tape.value(out.logits).clone())
            }
        }
    }

    /// Infer-mode logits `(n, classes)`; does not touch the model.
    pub fn infer(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.infer_outputs(batch)?.0)
    }

    /// Infer-mode logits and last-stage features.
    pub fn infer_outputs(&self, batch: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let params = self.params.leaves(&mut tape);
        let input = tape.leaf(batch.clone());
        let out = self.forward_tape(&mut tape, &params, input, Mode::Infer)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }

    /// Per-clip cost rows at the configured input shape.
    pub fn trace(&self) -> Result<Vec<LayerInfo>> {
        let [c, t, h, w] = self.config.clip_shape();
        let mut rows = Vec::new();
        let net = &self.net;
        let s = net.stem.trace([c * t, h, w], &mut rows)?;
        net.stem_bn.trace(s, &mut rows);
        push_act(&mut rows, "stem.relu", s);
        let s = net.down.trace(s, &mut rows)?;
        net.down_bn.trace(s, &mut rows);
        push_act(&mut rows, "down.relu", s);
        let mut s = s;
        for block in net.stages.iter().flatten() {
            s = block.trace(s, &mut rows)?;
        }
        rows.push(LayerInfo {
            name: "pool".into(),
            kind: LayerKind::Pool,
            params: 0,
            ops: s[0] as u64,
            out_shape: vec![s[0]],
            kernel: 0,
            stride: 1,
        });
        net.head.trace(&mut rows);
        Ok(rows)
    }

    /// Same architecture and values in another element type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
            mode: self.mode,
        }
    }
}

fn push_act(rows: &mut Vec<LayerInfo>, name: &str, s: [usize; 3]) {
    rows.push(LayerInfo {
        name: name.into(),
        kind: LayerKind::Activation,
        params: 0,
        ops: (s[0] * s[1] * s[2]) as u64,
        out_shape: s.to_vec(),
        kernel: 0,
        stride: 1,
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes_and_unique_names() {
        let m = build_model::<f32>(&ModelConfig::toy(), 1).unwrap();
        let mut names = m.params.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.params.len());
        let rows = m.trace().unwrap();
        assert_eq!(rows.iter().map(|r| r.params).sum::<u64>() as usize, m.param_count());
        let x = Tensor::<f32>::zeros(vec![2, 3, 4, 32, 32]).unwrap();
        let (logits, feats) = m.infer_outputs(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert_eq!(feats.shape(), &[2, 64, 1, 1]);
    }

    #[test]
    fn rejects_mismatched_input() {
        let m = build_model::<f32>(&ModelConfig::toy(), 1).unwrap();
        assert!(m.infer(&Tensor::zeros(vec![1, 3, 5, 32, 32]).unwrap()).is_err());
        assert!(m.infer(&Tensor::zeros(vec![3, 4, 32, 32]).unwrap()).is_ok());
    }
}
