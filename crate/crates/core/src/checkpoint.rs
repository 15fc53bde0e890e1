//! `SQZT` training checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SQZT" | version u32 | config length u32 | config (key=value UTF-8)
//! epoch u32 | rng: seed [u8; 32], stream u64, word position u128
//! tensor count u32 | per tensor: name length u32, name, dtype u8,
//!                    rank u8, dims u32 × rank, raw data
//! history count u32 | per epoch: epoch u32, lr f64, loss f64, top1 f64
//! ```
//!
//! Tensors are named `param/<name>`, `momentum/<name>`,
//! `running_mean/<bn>` and `running_var/<bn>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::EpochStats;

const MAGIC: &[u8; 4] = b"SQZT";
const VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub epoch: usize,
    pub rng: RngState,
    /// Parameters in model order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub momentum: Vec<Tensor<f32>>,
    /// `(bn name, mean, var)`.
    pub running: Vec<(String, Tensor<f32>, Tensor<f32>)>,
    pub history: Vec<EpochStats>,
}

impl Checkpoint {
    pub fn capture(
        run: &RunConfig,
        store: &ParamStore<f32>,
        momentum: &[Tensor<f32>],
        epoch: usize,
        rng: RngState,
        history: &[EpochStats],
    ) -> Self {
        Self {
            run: run.clone(),
            epoch,
            rng,
            params: (0..store.len()).map(|i| (store.name(i).to_string(), store.tensor(i).clone())).collect(),
            momentum: momentum.to_vec(),
            running: store
                .running()
                .iter()
                .map(|r| (r.name.clone(), r.mean.clone(), r.var.clone()))
                .collect(),
            history: history.to_vec(),
        }
    }

    /// Copies parameters and running statistics into a store built from
    /// the same config; every name must match.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() || self.running.len() != store.running().len() {
            return Err(Error::format("SQZT", "tensor count differs from the model"));
        }
        for (name, t) in &self.params {
            let dst = store
                .get_mut(name)
                .ok_or_else(|| Error::format("SQZT", format!("unknown parameter {name}")))?;
            if dst.shape() != t.shape() {
                return Err(Error::format("SQZT", format!("{name}: shape {:?} vs {:?}", t.shape(), dst.shape())));
            }
            *dst = t.clone();
        }
        for (dst, (name, mean, var)) in store.running_mut().iter_mut().zip(&self.running) {
            if &dst.name != name || dst.mean.shape() != mean.shape() || dst.var.shape() != var.shape() {
                return Err(Error::format("SQZT", format!("running statistics {name} do not match")));
            }
            dst.mean = mean.clone();
            dst.var = var.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let text = self.run.to_kv();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.epoch as u32).to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (name, t) in &self.params {
            named.push((format!("param/{name}"), t));
        }
        for ((name, _), t) in self.params.iter().zip(&self.momentum) {
            named.push((format!("momentum/{name}"), t));
        }
        for (name, mean, var) in &self.running {
            named.push((format!("running_mean/{name}"), mean));
            named.push((format!("running_var/{name}"), var));
        }
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, t) in named {
            write_tensor(&mut w, &name, t)?;
        }
        w.write_all(&(self.history.len() as u32).to_le_bytes())?;
        for h in &self.history {
            w.write_all(&(h.epoch as u32).to_le_bytes())?;
            for v in [h.lr, h.loss, h.top1] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.bytes(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("SQZT", format!("magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("SQZT", format!("unsupported version {version}")));
        }
        let text = r.string()?;
        let mut run = RunConfig::default();
        run.apply_str(&text)?;
        let epoch = r.u32()? as usize;
        let mut seed = [0u8; 32];
        r.bytes(&mut seed)?;
        let stream = r.u64()?;
        let mut wp = [0u8; 16];
        r.bytes(&mut wp)?;
        let rng = RngState {
            seed,
            stream,
            word_pos: u128::from_le_bytes(wp),
        };
        let count = r.u32()? as usize;
        let (mut params, mut momentum, mut means, mut vars) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            let (kind, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::format("SQZT", format!("tensor name {name:?}")))?;
            match kind {
                "param" => params.push((rest.to_string(), t)),
                "momentum" => momentum.push(t),
                "running_mean" => means.push((rest.to_string(), t)),
                "running_var" => vars.push(t),
                _ => return Err(Error::format("SQZT", format!("tensor name {name:?}"))),
            }
        }
        if momentum.len() != params.len() || means.len() != vars.len() {
            return Err(Error::format("SQZT", "incomplete optimizer or running state"));
        }
        let running = means.into_iter().zip(vars).map(|((n, m), v)| (n, m, v)).collect();
        let n = r.u32()? as usize;
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            history.push(EpochStats {
                epoch: r.u32()? as usize,
                lr: r.f64()?,
                loss: r.f64()?,
                top1: r.f64()?,
            });
        }
        let mut tail = [0u8; 1];
        if r.0.read(&mut tail)? != 0 {
            return Err(Error::format("SQZT", "trailing bytes"));
        }
        Ok(Self {
            run,
            epoch,
            rng,
            params,
            momentum,
            running,
            history,
        })
    }
}

fn write_tensor<S: Scalar, W: Write>(w: &mut W, name: &str, t: &Tensor<S>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[S::DTYPE.tag(), t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&S::to_le_bytes_vec(t.data()))?;
    Ok(())
}

fn read_tensor<R: Read>(r: &mut Reader<R>) -> Result<(String, Tensor<f32>)> {
    let name = r.string()?;
    let mut head = [0u8; 2];
    r.bytes(&mut head)?;
    let dtype = DType::from_tag(head[0]).ok_or_else(|| Error::format("SQZT", format!("{name}: dtype tag {}", head[0])))?;
    let dims: Vec<usize> = (0..head[1]).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let numel: usize = dims.iter().product();
    let mut raw = vec![0u8; numel * dtype.size()];
    r.bytes(&mut raw)?;
    let data: Vec<f32> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(f32::from_le_chunk).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_chunk(c) as f32).collect(),
    };
    Ok((name, Tensor::new(dims, data)?))
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0
            .read_exact(buf)
            .map_err(|_| Error::format("SQZT", "file truncated"))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 24 {
            return Err(Error::format("SQZT", "implausible string length"));
        }
        let mut b = vec![0u8; n];
        self.bytes(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::format("SQZT", "string is not UTF-8"))
    }
}
