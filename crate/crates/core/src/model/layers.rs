//! Building blocks of the network. Each layer refers to its parameters by
//! position in a [`ParamStore`], runs on a [`Tape`] through a [`Ctx`], and can
//! describe its own cost rows without running.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::batchnorm::Mode;
use crate::ops::pool::PoolKind;
use crate::tensor::Scalar;

use super::config::{ModelConfig, Variant};
use super::params::{ParamBuilder, ParamKind, ParamStore};

/// Forward-pass context: the tape, the tape leaves of every parameter, and
/// the batch-norm layers that ran in train mode.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub params: &'a [Var],
    pub store: &'a ParamStore<S>,
    pub mode: Mode,
    /// `(running-stats slot, output variable)` of each train-mode batch norm.
    pub bn_records: Vec<(usize, Var)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(tape: &'a mut Tape<S>, params: &'a [Var], store: &'a ParamStore<S>, mode: Mode) -> Self {
        Self {
            tape,
            params,
            store,
            mode,
            bn_records: Vec::new(),
        }
    }

    fn param(&self, i: usize) -> Var {
        self.params[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    BatchNorm,
    Activation,
    Elementwise,
    Pool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Activation => "activation",
            LayerKind::Elementwise => "elementwise",
            LayerKind::Pool => "pool",
        }
    }

    /// Conv and linear rows carry multiply-accumulates; the rest carry
    /// one operation per output element.
    pub fn is_mac(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Linear)
    }
}

/// One row of a per-sample cost trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    /// Multiply-accumulates for conv/linear, elementwise operations otherwise.
    pub ops: u64,
    pub out_shape: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

fn elementwise(out: &mut Vec<LayerInfo>, name: String, kind: LayerKind, shape: &[usize], params: u64) {
    out.push(LayerInfo {
        name,
        kind,
        params,
        ops: shape.iter().product::<usize>() as u64,
        out_shape: shape.to_vec(),
        kernel: 0,
        stride: 1,
    });
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub weight: usize,
    pub bias: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<S: Scalar>(
        b: &mut ParamBuilder<S>,
        name: String,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.he(format!("{name}.weight"), ParamKind::ConvWeight, vec![c_out, c_in, k, k], c_in * k * k)?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), ParamKind::Bias, vec![c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            name,
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
            pad,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.weight), self.bias.map(|i| cx.param(i)));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Temporal focus convolution: input channels scaled by `(n, c_in)` weights.
    pub fn forward_scaled<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var, weights: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.weight), self.bias.map(|i| cx.param(i)));
        cx.tape.tfc2d(x, w, b, weights, self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn params(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k + if self.bias.is_some() { self.c_out } else { 0 }) as u64
    }

    pub(crate) fn trace(&self, shape: [usize; 3], out: &mut Vec<LayerInfo>) -> Result<[usize; 3]> {
        let [c, h, w] = shape;
        if c != self.c_in || h + 2 * self.pad < self.k || w + 2 * self.pad < self.k {
            return Err(Error::shape("trace", format!("{} cannot take {shape:?}", self.name)));
        }
        let (oh, ow) = self.out_hw(h, w);
        out.push(LayerInfo {
            name: self.name.clone(),
            kind: LayerKind::Conv,
            params: self.params(),
            ops: (self.c_out * self.c_in * self.k * self.k * oh * ow) as u64,
            out_shape: vec![self.c_out, oh, ow],
            kernel: self.k,
            stride: self.stride,
        });
        Ok([self.c_out, oh, ow])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: usize,
    pub beta: usize,
    /// Running-statistics slot.
    pub slot: usize,
    pub channels: usize,
}

impl BatchNorm {
    pub fn build<S: Scalar>(b: &mut ParamBuilder<S>, name: String, channels: usize) -> Result<Self> {
        let gamma = b.constant(format!("{name}.gamma"), ParamKind::BnGamma, vec![channels], 1.0)?;
        let beta = b.constant(format!("{name}.beta"), ParamKind::BnBeta, vec![channels], 0.0)?;
        let slot = b.running(name.clone(), channels)?;
        Ok(Self {
            name,
            gamma,
            beta,
            slot,
            channels,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gamma), cx.param(self.beta));
        let eps = cx.store.bn_eps;
        match cx.mode {
            Mode::Train => {
                let y = cx.tape.batchnorm_train(x, g, b, eps)?;
                cx.bn_records.push((self.slot, y));
                Ok(y)
            }
            Mode::Infer => {
                let r = &cx.store.running()[self.slot];
                cx.tape.batchnorm_infer(x, g, b, &r.mean, &r.var, eps)
            }
        }
    }

    pub(crate) fn trace(&self, shape: [usize; 3], out: &mut Vec<LayerInfo>) {
        elementwise(out, self.name.clone(), LayerKind::BatchNorm, &shape, 2 * self.channels as u64);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: usize,
    pub bias: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn build<S: Scalar>(b: &mut ParamBuilder<S>, name: String, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = b.he(format!("{name}.weight"), ParamKind::LinearWeight, vec![d_out, d_in], d_in)?;
        let bias = if bias {
            Some(b.constant(format!("{name}.bias"), ParamKind::Bias, vec![d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            name,
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.weight), self.bias.map(|i| cx.param(i)));
        cx.tape.linear(x, w, b)
    }

    pub(crate) fn trace(&self, out: &mut Vec<LayerInfo>) {
        out.push(LayerInfo {
            name: self.name.clone(),
            kind: LayerKind::Linear,
            params: (self.d_in * self.d_out + self.bias.map_or(0, |_| self.d_out)) as u64,
            ops: (self.d_in * self.d_out) as u64,
            out_shape: vec![self.d_out],
            kernel: 0,
            stride: 1,
        });
    }
}

/// Channel weights: global max pool, two-layer MLP, sigmoid.
#[derive(Clone, Debug)]
pub struct Wcm {
    pub name: String,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Wcm {
    pub fn build<S: Scalar>(b: &mut ParamBuilder<S>, name: String, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = crate::ops::wcm::hidden_width(channels, reduction);
        Ok(Self {
            fc1: Linear::build(b, format!("{name}.fc1"), channels, hidden, true)?,
            fc2: Linear::build(b, format!("{name}.fc2"), hidden, channels, true)?,
            name,
        })
    }

    /// `(n, c, h, w) -> (n, c)` weights in `(0, 1)`.
    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let p = cx.tape.global_pool(x, PoolKind::GlobalMax)?;
        let h = self.fc1.forward(cx, p)?;
        let h = cx.tape.relu(h);
        let z = self.fc2.forward(cx, h)?;
        Ok(cx.tape.sigmoid(z))
    }

    pub(crate) fn trace(&self, c: usize, out: &mut Vec<LayerInfo>) {
        elementwise(out, format!("{}.pool", self.name), LayerKind::Pool, &[c], 0);
        self.fc1.trace(out);
        elementwise(out, format!("{}.relu", self.name), LayerKind::Activation, &[self.fc1.d_out], 0);
        self.fc2.trace(out);
        elementwise(out, format!("{}.sigmoid", self.name), LayerKind::Activation, &[c], 0);
    }
}

/// Inter-temporal object interaction branch.
///
/// Gate path: 3×3 TFC to the temporal width, BN, ReLU, plus the position
/// encoding, 7×7 relation conv, BN, ReLU, 3×3 conv back to `c`, sigmoid.
/// Value path: 3×3 conv, BN. Output is gate times value.
#[derive(Clone, Debug)]
pub struct IoiBranch {
    pub name: String,
    pub tfc: Conv,
    pub tfc_bn: BatchNorm,
    pub pos: usize,
    pub relation: Conv,
    pub relation_bn: BatchNorm,
    pub gate: Conv,
    pub value: Conv,
    pub value_bn: BatchNorm,
}

impl IoiBranch {
    pub fn build<S: Scalar>(b: &mut ParamBuilder<S>, name: String, c: usize, temporal: usize) -> Result<Self> {
        if c == 0 || temporal == 0 {
            return Err(Error::Config(format!("{name}: channel and temporal widths must be >= 1")));
        }
        Ok(Self {
            tfc: Conv::build(b, format!("{name}.tfc"), c, temporal, 3, 1, 1, false)?,
            tfc_bn: BatchNorm::build(b, format!("{name}.tfc_bn"), temporal)?,
            pos: b.constant(format!("{name}.pos"), ParamKind::PosEncoding, vec![temporal, 1, 1], 0.0)?,
            relation: Conv::build(b, format!("{name}.relation"), temporal, temporal, 7, 1, 3, false)?,
            relation_bn: BatchNorm::build(b, format!("{name}.relation_bn"), temporal)?,
            gate: Conv::build(b, format!("{name}.gate"), temporal, c, 3, 1, 1, false)?,
            value: Conv::build(b, format!("{name}.value"), c, c, 3, 1, 1, false)?,
            value_bn: BatchNorm::build(b, format!("{name}.value_bn"), c)?,
            name,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var, weights: Var) -> Result<Var> {
        let g = self.tfc.forward_scaled(cx, x, weights)?;
        let g = self.tfc_bn.forward(cx, g)?;
        let g = cx.tape.relu(g);
        let pos = cx.param(self.pos);
        let g = cx.tape.add(g, pos)?;
        let g = self.relation.forward(cx, g)?;
        let g = self.relation_bn.forward(cx, g)?;
        let g = cx.tape.relu(g);
        let g = self.gate.forward(cx, g)?;
        let g = cx.tape.sigmoid(g);
        let v = self.value.forward(cx, x)?;
        let v = self.value_bn.forward(cx, v)?;
        cx.tape.mul(v, g)
    }

    pub(crate) fn trace(&self, shape: [usize; 3], out: &mut Vec<LayerInfo>) -> Result<[usize; 3]> {
        let n = &self.name;
        let s = self.tfc.trace(shape, out)?;
        self.tfc_bn.trace(s, out);
        elementwise(out, format!("{n}.tfc_relu"), LayerKind::Activation, &s, 0);
        elementwise(out, format!("{n}.pos_add"), LayerKind::Elementwise, &s, s[0] as u64);
        let s = self.relation.trace(s, out)?;
        self.relation_bn.trace(s, out);
        elementwise(out, format!("{n}.relation_relu"), LayerKind::Activation, &s, 0);
        let s = self.gate.trace(s, out)?;
        elementwise(out, format!("{n}.sigmoid"), LayerKind::Activation, &s, 0);
        let v = self.value.trace(shape, out)?;
        self.value_bn.trace(v, out);
        elementwise(out, format!("{n}.gate_mul"), LayerKind::Elementwise, &v, 0);
        Ok(v)
    }
}

/// Channel-time learning module: a 1×1 TFC branch plus the IOI branch,
/// both scaled by one shared set of channel weights.
#[derive(Clone, Debug)]
pub struct CtlModule {
    pub name: String,
    pub wcm: Wcm,
    pub tfc: Option<(Conv, BatchNorm)>,
    pub ioi: Option<IoiBranch>,
}

impl CtlModule {
    pub fn build<S: Scalar>(b: &mut ParamBuilder<S>, name: String, c: usize, bc: &BlockConfig) -> Result<Self> {
        if !bc.variant.has_tfc() && !bc.variant.has_ioi() {
            return Err(Error::Config(format!("{name}: variant {} has no CTL branch", bc.variant)));
        }
        let wcm = Wcm::build(b, format!("{name}.wcm"), c, bc.wcm_reduction)?;
        let tfc = if bc.variant.has_tfc() {
            Some((
                Conv::build(b, format!("{name}.tfc"), c, c, 1, 1, 0, false)?,
                BatchNorm::build(b, format!("{name}.tfc_bn"), c)?,
            ))
        } else {
            None
        };
        let ioi = if bc.variant.has_ioi() {
            Some(IoiBranch::build(b, format!("{name}.ioi"), c, bc.temporal_channels)?)
        } else {
            None
        };
        Ok(Self { name, wcm, tfc, ioi })
    }

    /// Outputs of the two branches, each `None` when the variant omits it.
    pub fn branches<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<(Option<Var>, Option<Var>)> {
        let weights = self.wcm.forward(cx, x)?;
        let b1 = match &self.tfc {
            Some((conv, bn)) => {
                let y = conv.forward_scaled(cx, x, weights)?;
                Some(bn.forward(cx, y)?)
            }
            None => None,
        };
        let b2 = match &self.ioi {
            Some(ioi) => Some(ioi.forward(cx, x, weights)?),
            None => None,
        };
        Ok((b1, b2))
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        match self.branches(cx, x)? {
            (Some(a), Some(b)) => cx.tape.add(a, b),
            (Some(a), None) | (None, Some(a)) => Ok(a),
            (None, None) => unreachable!("validated at build"),
        }
    }

    pub(crate) fn trace(&self, shape: [usize; 3], out: &mut Vec<LayerInfo>) -> Result<[usize; 3]> {
        self.wcm.trace(shape[0], out);
        if let Some((conv, bn)) = &self.tfc {
            let s = conv.trace(shape, out)?;
            bn.trace(s, out);
        }
        if let Some(ioi) = &self.ioi {
            ioi.trace(shape, out)?;
        }
        if self.tfc.is_some() && self.ioi.is_some() {
            elementwise(out, format!("{}.branch_add", self.name), LayerKind::Elementwise, &shape, 0);
        }
        Ok(shape)
    }
}

/// Per-block settings shared by every block of a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub reduction: f64,
    pub temporal_channels: usize,
    pub wcm_reduction: usize,
    pub variant: Variant,
}

impl BlockConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            reduction: cfg.reduction,
            temporal_channels: cfg.temporal_channels,
            wcm_reduction: cfg.wcm_reduction,
            variant: cfg.variant,
        }
    }

    pub fn bottleneck_width(&self, c: usize) -> usize {
        ((c as f64 * self.reduction).round() as usize).max(1)
    }
}

#[derive(Clone, Debug)]
pub enum Middle {
    Ctl(CtlModule),
    Conv3x3(Conv, BatchNorm),
}

/// Bottleneck block: 1×1 reduce, middle operator, 1×1 expand, residual.
/// The first block of a stage carries a 1×1 projection shortcut and the
/// stage stride (on the reduce conv); the others are channel-preserving
/// with an identity shortcut.
#[derive(Clone, Debug)]
pub struct CtlBlock {
    pub name: String,
    pub reduce: Conv,
    pub reduce_bn: BatchNorm,
    pub middle: Middle,
    pub expand: Conv,
    pub expand_bn: BatchNorm,
    pub shortcut: Option<(Conv, BatchNorm)>,
}

impl CtlBlock {
    pub fn build<S: Scalar>(
        b: &mut ParamBuilder<S>,
        name: String,
        c_in: usize,
        c_out: usize,
        stride: usize,
        bc: &BlockConfig,
    ) -> Result<Self> {
        if !(bc.reduction.is_finite() && bc.reduction > 0.0) {
            return Err(Error::Config(format!("{name}: reduction must be positive")));
        }
        let m = bc.bottleneck_width(c_out);
        let reduce = Conv::build(b, format!("{name}.reduce"), c_in, m, 1, stride, 0, false)?;
        let reduce_bn = BatchNorm::build(b, format!("{name}.reduce_bn"), m)?;
        let middle = match bc.variant {
            Variant::Conv3x3 => Middle::Conv3x3(
                Conv::build(b, format!("{name}.mid"), m, m, 3, 1, 1, false)?,
                BatchNorm::build(b, format!("{name}.mid_bn"), m)?,
            ),
            _ => Middle::Ctl(CtlModule::build(b, format!("{name}.ctl"), m, bc)?),
        };
        let expand = Conv::build(b, format!("{name}.expand"), m, c_out, 1, 1, 0, false)?;
        let expand_bn = BatchNorm::build(b, format!("{name}.expand_bn"), c_out)?;
        let shortcut = if c_in != c_out || stride != 1 {
            Some((
                Conv::build(b, format!("{name}.shortcut"), c_in, c_out, 1, stride, 0, false)?,
                BatchNorm::build(b, format!("{name}.shortcut_bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            name,
            reduce,
            reduce_bn,
            middle,
            expand,
            expand_bn,
            shortcut,
        })
    }

    pub fn forward<S: Scalar>(&self, cx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(cx, x)?;
        let h = self.reduce_bn.forward(cx, h)?;
        let h = cx.tape.relu(h);
        let h = match &self.middle {
            Middle::Ctl(m) => m.forward(cx, h)?,
            Middle::Conv3x3(conv, bn) => {
                let y = conv.forward(cx, h)?;
                bn.forward(cx, y)?
            }
        };
        let h = cx.tape.relu(h);
        let h = self.expand.forward(cx, h)?;
        let h = self.expand_bn.forward(cx, h)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let y = conv.forward(cx, x)?;
                bn.forward(cx, y)?
            }
            None => x,
        };
        cx.tape.add(h, s)
    }

    pub(crate) fn trace(&self, shape: [usize; 3], out: &mut Vec<LayerInfo>) -> Result<[usize; 3]> {
        let n = &self.name;
        let s = self.reduce.trace(shape, out)?;
        self.reduce_bn.trace(s, out);
        elementwise(out, format!("{n}.reduce_relu"), LayerKind::Activation, &s, 0);
        let s = match &self.middle {
            Middle::Ctl(m) => m.trace(s, out)?,
            Middle::Conv3x3(conv, bn) => {
                let s = conv.trace(s, out)?;
                bn.trace(s, out);
                s
            }
        };
        elementwise(out, format!("{n}.mid_relu"), LayerKind::Activation, &s, 0);
        let s = self.expand.trace(s, out)?;
        self.expand_bn.trace(s, out);
        if let Some((conv, bn)) = &self.shortcut {
            let p = conv.trace(shape, out)?;
            bn.trace(p, out);
        }
        elementwise(out, format!("{n}.residual_add"), LayerKind::Elementwise, &s, 0);
        Ok(s)
    }
}
