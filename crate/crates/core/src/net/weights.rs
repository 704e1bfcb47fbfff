//! Parameters of the toy denoiser and their on-disk checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDMW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Channels of the full-resolution refinement stage.
pub const REFINE_CHANNELS: usize = 16;

/// Shape hyperparameters of the U-Net.
///
/// Layout: 2×2 space-to-depth stem → block 0 → 2×2 down → blocks 1, 2 →
/// 2×2 up (+ skip from block 0) → block 3 → head → depth-to-space →
/// full-resolution refinement over the head features and `z_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub heads: usize,
    pub d_head: usize,
    pub d_txt: usize,
    pub ff_mult: usize,
    pub time_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            widths: vec![32, 64, 64, 32],
            heads: 2,
            d_head: 16,
            d_txt: 32,
            ff_mult: 4,
            time_dim: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.widths;
        if w.len() != 4 || w[0] != w[3] || w[1] != w[2] || w.contains(&0) {
            return Err(Error::Config(format!(
                "widths must be [a, b, b, a] with positive entries, got {w:?}"
            )));
        }
        if !self.image_size.is_multiple_of(4) || self.image_size == 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by 4",
                self.image_size
            )));
        }
        if self.heads == 0 || self.d_head == 0 || self.d_txt == 0 || self.time_dim < 2 {
            return Err(Error::Config(
                "attention and embedding widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn inner(&self) -> usize {
        self.heads * self.d_head
    }

    /// Spatial side length of block `i`.
    pub fn block_side(&self, i: usize) -> usize {
        match i {
            0 | 3 => self.image_size / 2,
            _ => self.image_size / 4,
        }
    }

    fn block_param_count(&self, m: usize) -> usize {
        let inner = self.inner();
        let ff = self.ff_mult * m;
        let norms = 4 * 2 * m;
        let temb = self.time_dim * m + m;
        let proj = 2 * (m * m + m);
        let self_attn = 3 * m * inner + inner * m + m;
        let cross = m * inner + 2 * self.d_txt * inner + inner * m + m;
        let feed = m * ff + ff + ff * m + m;
        norms + temb + proj + self_attn + cross + feed
    }

    /// Parameter count implied by the declared shapes, computed without
    /// instantiating any tensor.
    pub fn declared_param_count(&self) -> usize {
        let c4 = 4 * self.channels;
        let (w0, w1) = (self.widths[0], self.widths[1]);
        let (s0, s1) = (self.block_side(0), self.block_side(1));
        let sin = self.time_dim / 2 * 2;
        let stem = 9 * w0 * c4 + w0 + w0 * s0 * s0;
        let time =
            sin * self.time_dim + self.time_dim + self.time_dim * self.time_dim + self.time_dim;
        let down = w1 * 4 * w0 + w1 + w1 * s1 * s1;
        let up = 4 * w0 * w1 + 4 * w0;
        let (k, c) = (REFINE_CHANNELS, self.channels);
        let head = 2 * w0 + 9 * 4 * k * w0 + 4 * k + 9 * (k + c) * k + k + c * k + c;
        let blocks: usize = self.widths.iter().map(|&m| self.block_param_count(m)).sum();
        stem + time + down + up + head + blocks
    }
}

macro_rules! named_tensors {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
                $( out.push((format!("{prefix}{}", stringify!($field)), &self.$field)); )*
            }
            pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
                $( out.push((format!("{prefix}{}", stringify!($field)), &mut self.$field)); )*
            }
        }
    };
}

/// One transformer block: proj_in → self-attn → cross-attn → FF → proj_out.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub width: usize,
    pub temb_w: Tensor,
    pub temb_b: Tensor,
    pub norm_in_g: Tensor,
    pub norm_in_b: Tensor,
    pub proj_in: Tensor,
    pub proj_in_b: Tensor,
    pub norm1_g: Tensor,
    pub norm1_b: Tensor,
    pub self_q: Tensor,
    pub self_k: Tensor,
    pub self_v: Tensor,
    pub self_o: Tensor,
    pub self_o_b: Tensor,
    pub norm2_g: Tensor,
    pub norm2_b: Tensor,
    pub cross_q: Tensor,
    pub cross_k: Tensor,
    pub cross_v: Tensor,
    pub cross_o: Tensor,
    pub cross_o_b: Tensor,
    pub norm3_g: Tensor,
    pub norm3_b: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub proj_out: Tensor,
    pub proj_out_b: Tensor,
}

named_tensors!(BlockWeights {
    temb_w,
    temb_b,
    norm_in_g,
    norm_in_b,
    proj_in,
    proj_in_b,
    norm1_g,
    norm1_b,
    self_q,
    self_k,
    self_v,
    self_o,
    self_o_b,
    norm2_g,
    norm2_b,
    cross_q,
    cross_k,
    cross_v,
    cross_o,
    cross_o_b,
    norm3_g,
    norm3_b,
    ff_w1,
    ff_b1,
    ff_w2,
    ff_b2,
    proj_out,
    proj_out_b,
});

fn linear(rng: &mut Stream, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng)
}

fn conv(rng: &mut Stream, c_out: usize, c_in: usize, gain: f64) -> Tensor {
    Tensor::randn(&[c_out, c_in, 1], gain / (c_in as f64).sqrt(), rng)
}

fn conv3(rng: &mut Stream, c_out: usize, c_in: usize, gain: f64) -> Tensor {
    Tensor::randn(&[c_out, c_in, 9], gain / ((9 * c_in) as f64).sqrt(), rng)
}

impl BlockWeights {
    pub fn init(m: usize, cfg: &ArchConfig, rng: &mut Stream) -> Self {
        let inner = cfg.inner();
        let ff = cfg.ff_mult * m;
        let ones = || Tensor::full(&[m], 1.0);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        BlockWeights {
            width: m,
            temb_w: linear(rng, cfg.time_dim, m, 1.0),
            temb_b: zeros(m),
            norm_in_g: ones(),
            norm_in_b: zeros(m),
            proj_in: conv(rng, m, m, 1.0),
            proj_in_b: zeros(m),
            norm1_g: ones(),
            norm1_b: zeros(m),
            self_q: linear(rng, m, inner, 1.0),
            self_k: linear(rng, m, inner, 1.0),
            self_v: linear(rng, m, inner, 1.0),
            self_o: linear(rng, inner, m, 0.5),
            self_o_b: zeros(m),
            norm2_g: ones(),
            norm2_b: zeros(m),
            cross_q: linear(rng, m, inner, 1.0),
            cross_k: linear(rng, cfg.d_txt, inner, 1.0),
            cross_v: linear(rng, cfg.d_txt, inner, 1.0),
            cross_o: linear(rng, inner, m, 0.5),
            cross_o_b: zeros(m),
            norm3_g: ones(),
            norm3_b: zeros(m),
            ff_w1: linear(rng, m, ff, 1.0),
            ff_b1: zeros(ff),
            ff_w2: linear(rng, ff, m, 0.5),
            ff_b2: zeros(m),
            proj_out: conv(rng, m, m, 0.5),
            proj_out_b: zeros(m),
        }
    }
}

/// Stem, timestep MLP, resampling convs and output head.
#[derive(Debug, Clone)]
pub struct TrunkWeights {
    pub stem: Tensor,
    pub stem_b: Tensor,
    pub pos0: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    pub down: Tensor,
    pub down_b: Tensor,
    pub pos1: Tensor,
    pub up: Tensor,
    pub up_b: Tensor,
    pub head_norm_g: Tensor,
    pub head_norm_b: Tensor,
    pub head: Tensor,
    pub head_b: Tensor,
    pub refine: Tensor,
    pub refine_b: Tensor,
    pub out: Tensor,
    pub out_b: Tensor,
}

named_tensors!(TrunkWeights {
    stem,
    stem_b,
    pos0,
    time_w1,
    time_b1,
    time_w2,
    time_b2,
    down,
    down_b,
    pos1,
    up,
    up_b,
    head_norm_g,
    head_norm_b,
    head,
    head_b,
    refine,
    refine_b,
    out,
    out_b,
});

/// Every parameter of the denoiser ε_θ.
#[derive(Debug, Clone)]
pub struct UNetWeights {
    pub config: ArchConfig,
    pub trunk: TrunkWeights,
    pub blocks: Vec<BlockWeights>,
}

/// Channel-major 2-D sinusoidal pattern `[c × side²]`.
fn spatial_code(c: usize, side: usize, scale: f64) -> Tensor {
    let mut data = vec![0.0; c * side * side];
    let half = c / 2;
    for ch in 0..c {
        let (coord_is_y, k) = if ch < half {
            (true, ch)
        } else {
            (false, ch - half)
        };
        let freq = std::f64::consts::PI * (1 + k / 2) as f64 / side as f64;
        for y in 0..side {
            for x in 0..side {
                let p = if coord_is_y { y } else { x } as f64 + 0.5;
                let v = if k % 2 == 0 {
                    (p * freq).sin()
                } else {
                    (p * freq).cos()
                };
                data[ch * side * side + y * side + x] = scale * v;
            }
        }
    }
    Tensor::new(data, &[c, side * side]).expect("shape matches")
}

impl UNetWeights {
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut rng::stream(seed, "unet-init", 0);
        let c4 = 4 * config.channels;
        let (w0, w1) = (config.widths[0], config.widths[1]);
        let (s0, s1) = (config.block_side(0), config.block_side(1));
        let td = config.time_dim;
        let sin = td / 2 * 2;
        let blocks = config
            .widths
            .iter()
            .map(|&m| BlockWeights::init(m, config, rng))
            .collect();
        Ok(UNetWeights {
            config: config.clone(),
            trunk: TrunkWeights {
                stem: conv3(rng, w0, c4, 1.0),
                stem_b: Tensor::zeros(&[w0]),
                pos0: spatial_code(w0, s0, 0.5),
                time_w1: linear(rng, sin, td, 1.0),
                time_b1: Tensor::zeros(&[td]),
                time_w2: linear(rng, td, td, 1.0),
                time_b2: Tensor::zeros(&[td]),
                down: conv(rng, w1, 4 * w0, 1.0),
                down_b: Tensor::zeros(&[w1]),
                pos1: spatial_code(w1, s1, 0.5),
                up: conv(rng, 4 * w0, w1, 1.0),
                up_b: Tensor::zeros(&[4 * w0]),
                head_norm_g: Tensor::full(&[w0], 1.0),
                head_norm_b: Tensor::zeros(&[w0]),
                head: conv3(rng, 4 * REFINE_CHANNELS, w0, 1.0),
                head_b: Tensor::zeros(&[4 * REFINE_CHANNELS]),
                refine: conv3(rng, REFINE_CHANNELS, REFINE_CHANNELS + config.channels, 1.0),
                refine_b: Tensor::zeros(&[REFINE_CHANNELS]),
                out: conv(rng, config.channels, REFINE_CHANNELS, 0.1),
                out_b: Tensor::zeros(&[config.channels]),
            },
            blocks,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.trunk.collect("", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("blocks.{i}."), &mut out);
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.trunk.collect_mut("", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("blocks.{i}."), &mut out);
        }
        out
    }

    /// Total number of scalar parameters actually instantiated.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Returns a copy whose every tensor is a fresh trainable leaf.
    pub fn as_params(&self) -> Self {
        let mut w = self.clone();
        for (_, t) in w.named_mut() {
            *t = t.param();
        }
        w
    }

    pub fn detached(&self) -> Self {
        let mut w = self.clone();
        for (_, t) in w.named_mut() {
            *t = t.detach();
        }
        w
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let named = self.named();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, config: &ArchConfig) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&raw);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut records = std::collections::HashMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let numel: usize = dims.iter().product();
            let data = r.f64s(numel)?;
            records.insert(name, Tensor::new(data, &dims)?);
        }
        if !r.is_done() {
            return Err(Error::Format(
                "trailing bytes after checkpoint records".into(),
            ));
        }
        let mut w = UNetWeights::init(config, 0)?;
        for (name, t) in w.named_mut() {
            let rec = records
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if rec.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, architecture expects {:?}",
                    rec.shape(),
                    t.shape()
                )));
            }
            *t = rec;
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::Format(format!(
                "unexpected tensor {extra} in checkpoint"
            )));
        }
        Ok(w)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Little-endian cursor used by the binary formats.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}
