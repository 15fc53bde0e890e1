//! Network hyperparameters and their `key=value` spelling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Middle operator of every bottleneck block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both CTL branches.
    Full,
    /// 1×1 temporal focus convolution only.
    TfcOnly,
    /// Inter-temporal object interaction branch only.
    IoiOnly,
    /// Plain 3×3 convolution in place of the CTL module.
    Conv3x3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Conv3x3, Variant::TfcOnly, Variant::IoiOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TfcOnly => "tfc",
            Variant::IoiOnly => "ioi",
            Variant::Conv3x3 => "base",
        }
    }

    pub fn has_tfc(self) -> bool {
        matches!(self, Variant::Full | Variant::TfcOnly)
    }

    pub fn has_ioi(self) -> bool {
        matches!(self, Variant::Full | Variant::IoiOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "tfc" | "tfc_only" | "branch1" => Ok(Variant::TfcOnly),
            "ioi" | "ioi_only" | "branch2" => Ok(Variant::IoiOnly),
            "base" | "conv3x3" => Ok(Variant::Conv3x3),
            other => Err(Error::Config(format!("unknown variant {other:?} (full, tfc, ioi, base)"))),
        }
    }
}

/// Network shape. Stage and stem widths are stored unscaled; the
/// `channel_factor` is applied by [`ModelConfig::stage_widths`] and
/// [`ModelConfig::stem_width`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub input_resolution: (usize, usize),
    pub channel_factor: f64,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub reduction: f64,
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Width of the IOI gate path (position encoding length).
    pub temporal_channels: usize,
    /// Hidden width of the channel-weight MLP is `c / wcm_reduction`.
    pub wcm_reduction: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            input_resolution: (224, 224),
            channel_factor: 1.0,
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [256, 512, 1024, 2048],
            reduction: 0.25,
            num_classes: 400,
            stem_channels: 64,
            temporal_channels: 16,
            wcm_reduction: 1,
            variant: Variant::Full,
        }
    }
}

/// Spatial extents must survive the five stride-2 stages.
pub const RESOLUTION_MULTIPLE: usize = 16;

fn scale(c: usize, factor: f64) -> usize {
    ((c as f64 * factor).round() as usize).max(1)
}

impl ModelConfig {
    /// Small network used for gradient checks and the direction task.
    pub fn toy() -> Self {
        Self {
            frames: 4,
            input_resolution: (32, 32),
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [8, 16, 32, 64],
            num_classes: 5,
            stem_channels: 8,
            temporal_channels: 4,
            ..Self::default()
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        self.stage_channels.map(|c| scale(c, self.channel_factor))
    }

    pub fn stem_width(&self) -> usize {
        scale(self.stem_channels, self.channel_factor)
    }

    /// Bottleneck width `round(r·C)`, at least 1.
    pub fn bottleneck_width(&self, c: usize) -> usize {
        ((c as f64 * self.reduction).round() as usize).max(1)
    }

    /// Shape of one clip, `(3, T, h, w)`.
    pub fn clip_shape(&self) -> [usize; 4] {
        [3, self.frames, self.input_resolution.0, self.input_resolution.1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("model.frames must be >= 1".into());
        }
        let (h, w) = self.input_resolution;
        if h == 0 || w == 0 || h % RESOLUTION_MULTIPLE != 0 || w % RESOLUTION_MULTIPLE != 0 {
            return bad(format!(
                "model.input_resolution {h}x{w} must be a positive multiple of {RESOLUTION_MULTIPLE}"
            ));
        }
        if !(self.channel_factor.is_finite() && self.channel_factor > 0.0) {
            return bad(format!("model.channel_factor {} must be positive", self.channel_factor));
        }
        if !(self.reduction.is_finite() && self.reduction > 0.0) {
            return bad(format!("model.reduction {} must be positive", self.reduction));
        }
        if self.stage_blocks.contains(&0) {
            return bad("model.stage_blocks entries must be >= 1".into());
        }
        if self.stage_channels.contains(&0) || self.stem_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("model.num_classes must be >= 1".into());
        }
        if self.temporal_channels == 0 {
            return bad("model.temporal_channels must be >= 1".into());
        }
        if self.wcm_reduction == 0 {
            return bad("model.wcm_reduction must be >= 1".into());
        }
        Ok(())
    }

    /// Applies one `key=value` setting; `key` is given without the `model.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "frames" => self.frames = parse(key, value)?,
            "input_resolution" | "resolution" => self.input_resolution = parse_resolution(value)?,
            "channel_factor" => self.channel_factor = parse(key, value)?,
            "stage_blocks" => self.stage_blocks = parse_four(key, value)?,
            "stage_channels" => self.stage_channels = parse_four(key, value)?,
            "reduction" => self.reduction = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "stem_channels" => self.stem_channels = parse(key, value)?,
            "temporal_channels" => self.temporal_channels = parse(key, value)?,
            "wcm_reduction" => self.wcm_reduction = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }

    /// `key=value` lines accepted by [`ModelConfig::set`], with the prefix.
    pub fn to_kv(&self) -> String {
        let join = |v: &[usize; 4]| v.map(|x| x.to_string()).join(",");
        format!(
            "model.frames={}\nmodel.input_resolution={}x{}\nmodel.channel_factor={}\nmodel.stage_blocks={}\n\
             model.stage_channels={}\nmodel.reduction={}\nmodel.num_classes={}\nmodel.stem_channels={}\n\
             model.temporal_channels={}\nmodel.wcm_reduction={}\nmodel.variant={}\n",
            self.frames,
            self.input_resolution.0,
            self.input_resolution.1,
            self.channel_factor,
            join(&self.stage_blocks),
            join(&self.stage_channels),
            self.reduction,
            self.num_classes,
            self.stem_channels,
            self.temporal_channels,
            self.wcm_reduction,
            self.variant,
        )
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| Error::Config(format!("{key}: expected 4 entries, got {}", v.len())))
}

/// `224`, `224x224` or `160x224`.
fn parse_resolution(value: &str) -> Result<(usize, usize)> {
    let key = "input_resolution";
    match value.split_once('x') {
        Some((h, w)) => Ok((parse(key, h)?, parse(key, w)?)),
        None => {
            let s = parse(key, value)?;
            Ok((s, s))
        }
    }
}
