//! Synthetic direction-of-motion videos, the `SQVD` dataset file, dense
//! frame sampling and multi-view clip construction.
//!
//! Each video shows one bright square moving at constant speed on a torus:
//! positions wrap at the frame border, so every frame holds the same amount
//! of foreground and start positions are uniform. A single frame therefore
//! says where the square is but nothing about where it is going.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MoveRight,
    MoveLeft,
    MoveUp,
    MoveDown,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::MoveRight,
        Direction::MoveLeft,
        Direction::MoveUp,
        Direction::MoveDown,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    /// Per-frame displacement `(dy, dx)` in units of the speed.
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::MoveRight => (0, 1),
            Direction::MoveLeft => (0, -1),
            Direction::MoveUp => (-1, 0),
            Direction::MoveDown => (1, 0),
        }
    }

    /// Class after a horizontal flip.
    pub fn mirrored(self) -> Self {
        match self {
            Direction::MoveRight => Direction::MoveLeft,
            Direction::MoveLeft => Direction::MoveRight,
            d => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::MoveRight => "move_right",
            Direction::MoveLeft => "move_left",
            Direction::MoveUp => "move_up",
            Direction::MoveDown => "move_down",
        }
    }
}

pub const NUM_CLASSES: usize = Direction::ALL.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoSpec {
    pub per_class: usize,
    pub resolution: (usize, usize),
    /// Frames per video.
    pub length: usize,
    pub object_size: usize,
    /// Pixels travelled per frame.
    pub speed: usize,
    pub noise_std: f64,
    pub background: f32,
    pub foreground: f32,
    pub seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        Self {
            per_class: 50,
            resolution: (48, 48),
            length: 32,
            object_size: 8,
            speed: 1,
            noise_std: 0.05,
            background: 0.1,
            foreground: 0.9,
            seed: 7,
        }
    }
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if self.length == 0 || h == 0 || w == 0 || self.object_size == 0 {
            return Err(Error::Config("video length, resolution and object size must be >= 1".into()));
        }
        if self.object_size > h.min(w) {
            return Err(Error::Config(format!(
                "object size {} does not fit a {h}x{w} frame",
                self.object_size
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One video `(3, L, h, w)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub frames: Tensor<f32>,
    pub label: usize,
}

impl VideoRecord {
    pub fn length(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Renders `spec.per_class` videos of every class, interleaved by class.
pub fn generate_dataset(spec: &SyntheticVideoSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = spec.resolution;
    let (l, s) = (spec.length, spec.object_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(spec.per_class * NUM_CLASSES);
    for _ in 0..spec.per_class {
        for dir in Direction::ALL {
            let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let (dy, dx) = dir.step();
            let mut data = vec![spec.background; 3 * l * h * w];
            for t in 0..l {
                let shift = (spec.speed * t) as isize;
                let py = (y0 as isize + dy * shift).rem_euclid(h as isize) as usize;
                let px = (x0 as isize + dx * shift).rem_euclid(w as isize) as usize;
                for c in 0..3 {
                    let frame = &mut data[(c * l + t) * h * w..][..h * w];
                    for y in 0..s {
                        let row = (py + y) % h * w;
                        for x in 0..s {
                            frame[row + (px + x) % w] = spec.foreground;
                        }
                    }
                }
            }
            if spec.noise_std > 0.0 {
                for v in &mut data {
                    *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                }
            }
            records.push(VideoRecord {
                frames: Tensor::new(vec![3, l, h, w], data)?,
                label: dir.label(),
            });
        }
    }
    Ok(Dataset {
        num_classes: NUM_CLASSES,
        records,
    })
}

const MAGIC: &[u8; 4] = b"SQVD";
const VERSION: u32 = 1;

/// Writes `magic, version, records, classes, channels, L, h, w` (u32 LE),
/// a dtype tag byte, then every record as raw f32 LE frames and a label byte.
pub fn write_sqvd(dataset: &Dataset, path: &Path) -> Result<()> {
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::Invalid("cannot write an empty dataset".into()))?;
    let dims = first.frames.shape().to_vec();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let header = [VERSION, dataset.len() as u32, dataset.num_classes as u32];
    for v in header.iter().chain(dims.iter().map(|&d| d as u32).collect::<Vec<_>>().iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&[DType::F32.tag()])?;
    for r in &dataset.records {
        if r.frames.shape() != dims.as_slice() || r.label >= dataset.num_classes || r.label > u8::MAX as usize {
            return Err(Error::Invalid("records must share one shape and hold valid labels".into()));
        }
        for v in r.frames.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[r.label as u8])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sqvd(path: &Path) -> Result<Dataset> {
    let bad = |d: String| Error::format("SQVD", d);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("magic {magic:?}")));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (n, classes) = (word()? as usize, word()? as usize);
    let dims: Vec<usize> = (0..4).map(|_| word().map(|v| v as usize)).collect::<Result<_>>()?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if DType::from_tag(tag[0]) != Some(DType::F32) {
        return Err(bad(format!("dtype tag {}", tag[0])));
    }
    if dims[0] != 3 {
        return Err(bad(format!("{} colour channels", dims[0])));
    }
    let numel: usize = dims.iter().product();
    let mut buf = vec![0u8; numel * 4];
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|_| bad(format!("record {i} truncated")))?;
        let data: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        r.read_exact(&mut tag).map_err(|_| bad(format!("record {i} truncated")))?;
        let label = tag[0] as usize;
        if label >= classes {
            return Err(bad(format!("record {i} label {label} >= {classes}")));
        }
        if let Some(j) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("SQVD record {i}"),
                index: j,
            });
        }
        records.push(VideoRecord {
            frames: Tensor::new(dims.clone(), data)?,
            label,
        });
    }
    if r.read(&mut tag)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok(Dataset {
        num_classes: classes,
        records,
    })
}

/// Frame indices `offset + i·interval` modulo the video length.
pub fn clip_indices(length: usize, frames: usize, interval: usize, offset: usize) -> Vec<usize> {
    (0..frames).map(|i| (offset + i * interval) % length).collect()
}

/// Dense sampling of `frames` frames; indices wrap around the video end.
pub fn sample_clip(video: &VideoRecord, frames: usize, interval: usize, offset: usize) -> Result<Tensor<f32>> {
    if frames == 0 || interval == 0 {
        return Err(Error::Invalid("frames and interval must be >= 1".into()));
    }
    let (l, (h, w)) = (video.length(), video.resolution());
    let plane = h * w;
    let idx = clip_indices(l, frames, interval, offset);
    let src = video.frames.data();
    let mut out = Vec::with_capacity(3 * frames * plane);
    for c in 0..3 {
        for &t in &idx {
            out.extend_from_slice(&src[(c * l + t) * plane..][..plane]);
        }
    }
    Tensor::new(vec![3, frames, h, w], out)
}

/// Frames covered by one clip, first to last inclusive.
pub fn clip_span(frames: usize, interval: usize) -> usize {
    (frames.max(1) - 1) * interval + 1
}

/// Largest offset whose clip stays inside the video (0 when none does).
pub fn max_offset(length: usize, frames: usize, interval: usize) -> usize {
    length.saturating_sub(clip_span(frames, interval))
}

/// Spatial window `(y, x, h, w)` of a `(3, T, H, W)` clip.
pub fn crop(clip: &Tensor<f32>, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let &[c, t, hh, ww] = clip.shape() else {
        return Err(Error::shape("crop", "expected (3, T, h, w)"));
    };
    if h == 0 || w == 0 || y + h > hh || x + w > ww {
        return Err(Error::shape("crop", format!("window {h}x{w} at ({y},{x}) outside {hh}x{ww}")));
    }
    let src = clip.data();
    let mut out = Vec::with_capacity(c * t * h * w);
    for p in 0..c * t {
        for row in y..y + h {
            out.extend_from_slice(&src[(p * hh + row) * ww + x..][..w]);
        }
    }
    Tensor::new(vec![c, t, h, w], out)
}

/// `n` positions spread evenly over `0..=span`, or the center for `n = 1`.
fn spread(n: usize, span: usize) -> Vec<usize> {
    if n == 1 {
        return vec![span / 2];
    }
    (0..n).map(|i| (i * span + (n - 1) / 2) / (n - 1)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewsConfig {
    pub frames: usize,
    pub interval: usize,
    pub n_clips: usize,
    pub n_crops: usize,
    pub crop: (usize, usize),
}

/// Top-left corners of the spatial crops: spread along the longer axis,
/// centered along the other.
pub fn crop_origins(resolution: (usize, usize), crop: (usize, usize), n_crops: usize) -> Result<Vec<(usize, usize)>> {
    let ((h, w), (ch, cw)) = (resolution, crop);
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(Error::Invalid(format!("crop {ch}x{cw} larger than frame {h}x{w}")));
    }
    if n_crops == 0 {
        return Err(Error::Invalid("n_crops must be >= 1".into()));
    }
    Ok(if w >= h {
        spread(n_crops, w - cw).into_iter().map(|x| ((h - ch) / 2, x)).collect()
    } else {
        spread(n_crops, h - ch).into_iter().map(|y| (y, (w - cw) / 2)).collect()
    })
}

/// Temporal offsets of the evaluation clips, spread evenly over the offsets
/// whose clips fit inside the video. One clip starts at 0.
pub fn clip_offsets(length: usize, frames: usize, interval: usize, n_clips: usize) -> Vec<usize> {
    let last = max_offset(length, frames, interval);
    if n_clips == 1 {
        return vec![0];
    }
    spread(n_clips, last)
}

/// `n_clips · n_crops` clips, clip-major.
pub fn make_views(video: &VideoRecord, cfg: &ViewsConfig) -> Result<Vec<Tensor<f32>>> {
    if cfg.n_clips == 0 {
        return Err(Error::Invalid("n_clips must be >= 1".into()));
    }
    let origins = crop_origins(video.resolution(), cfg.crop, cfg.n_crops)?;
    let mut views = Vec::with_capacity(cfg.n_clips * cfg.n_crops);
    for off in clip_offsets(video.length(), cfg.frames, cfg.interval, cfg.n_clips) {
        let clip = sample_clip(video, cfg.frames, cfg.interval, off)?;
        for &(y, x) in &origins {
            views.push(crop(&clip, y, x, cfg.crop.0, cfg.crop.1)?);
        }
    }
    Ok(views)
}

/// Reorders the frames of a `(3, T, h, w)` clip: output frame `i` is input
/// frame `perm[i]`.
pub fn permute_frames(clip: &Tensor<f32>, perm: &[usize]) -> Result<Tensor<f32>> {
    let &[c, t, h, w] = clip.shape() else {
        return Err(Error::shape("permute_frames", "expected (3, T, h, w)"));
    };
    let mut seen = vec![false; t];
    if perm.len() != t || perm.iter().any(|&p| p >= t || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!("{perm:?} is not a permutation of {t} frames")));
    }
    let plane = h * w;
    let src = clip.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for &p in perm {
            out.extend_from_slice(&src[(ch * t + p) * plane..][..plane]);
        }
    }
    Tensor::new(clip.shape().to_vec(), out)
}

/// Random frame order drawn from `rng`.
pub fn shuffle_frames<R: Rng + ?Sized>(clip: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    let mut perm: Vec<usize> = (0..clip.shape().get(1).copied().unwrap_or(0)).collect();
    perm.shuffle(rng);
    permute_frames(clip, &perm)
}

/// Mirrors every frame left to right.
pub fn hflip(clip: &Tensor<f32>) -> Tensor<f32> {
    let w = *clip.shape().last().expect("rank >= 1");
    let mut out = clip.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

/// Label after [`hflip`] for the direction classes.
pub fn mirror_label(label: usize) -> usize {
    Direction::from_label(label).map_or(label, |d| d.mirrored().label())
}

/// Stacks equally shaped clips into `(n, 3, T, h, w)`.
pub fn stack(clips: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = clips.first().ok_or_else(|| Error::Invalid("nothing to stack".into()))?;
    let mut data = Vec::with_capacity(first.numel() * clips.len());
    for c in clips {
        if c.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", c.shape(), first.shape())));
        }
        data.extend_from_slice(c.data());
    }
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}


/// Dataset generation and clip sampling settings (`data.*` keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Training split; `per_class` and `seed` refer to it.
    pub spec: SyntheticVideoSpec,
    pub test_per_class: usize,
    pub interval: usize,
    /// Random horizontal flip during training, with label swap.
    pub flip: bool,
    /// Shuffle the frames of every training and evaluation clip.
    pub shuffle_frames: bool,
    pub n_clips: usize,
    pub n_crops: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticVideoSpec::default(),
            test_per_class: 20,
            interval: 4,
            flip: true,
            shuffle_frames: false,
            n_clips: 2,
            n_crops: 1,
        }
    }
}

impl DataConfig {
    pub fn train_spec(&self) -> SyntheticVideoSpec {
        self.spec.clone()
    }

    /// Test split: same rendering, disjoint seed.
    pub fn test_spec(&self) -> SyntheticVideoSpec {
        SyntheticVideoSpec {
            per_class: self.test_per_class,
            seed: self.spec.seed ^ 0x7e57_7e57_7e57_7e57,
            ..self.spec.clone()
        }
    }

    /// Evaluation views for clips of `frames` frames at `crop` resolution.
    pub fn views(&self, frames: usize, crop: (usize, usize)) -> ViewsConfig {
        ViewsConfig {
            frames,
            interval: self.interval,
            n_clips: self.n_clips,
            n_crops: self.n_crops,
            crop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.interval == 0 || self.n_clips == 0 || self.n_crops == 0 {
            return Err(Error::Config("data.interval, data.n_clips and data.n_crops must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies one setting; `key` is given without the `data.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::model::config::parse;
        let s = &mut self.spec;
        match key {
            "per_class" => s.per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "resolution" => {
                let (h, w) = value.split_once('x').unwrap_or((value, value));
                s.resolution = (parse(key, h)?, parse(key, w)?);
            }
            "length" => s.length = parse(key, value)?,
            "object_size" => s.object_size = parse(key, value)?,
            "speed" => s.speed = parse(key, value)?,
            "noise_std" => s.noise_std = parse(key, value)?,
            "background" => s.background = parse(key, value)?,
            "foreground" => s.foreground = parse(key, value)?,
            "seed" => s.seed = parse(key, value)?,
            "interval" => self.interval = parse(key, value)?,
            "flip" => self.flip = parse(key, value)?,
            "shuffle_frames" => self.shuffle_frames = parse(key, value)?,
            "n_clips" => self.n_clips = parse(key, value)?,
            "n_crops" => self.n_crops = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key data.{key}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let s = &self.spec;
        format!(
            "data.per_class={}\ndata.test_per_class={}\ndata.resolution={}x{}\ndata.length={}\n\
             data.object_size={}\ndata.speed={}\ndata.noise_std={}\ndata.background={}\ndata.foreground={}\n\
             data.seed={}\ndata.interval={}\ndata.flip={}\ndata.shuffle_frames={}\ndata.n_clips={}\ndata.n_crops={}\n",
            s.per_class,
            self.test_per_class,
            s.resolution.0,
            s.resolution.1,
            s.length,
            s.object_size,
            s.speed,
            s.noise_std,
            s.background,
            s.foreground,
            s.seed,
            self.interval,
            self.flip,
            self.shuffle_frames,
            self.n_clips,
            self.n_crops,
        )
    }
}
