//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic        4 bytes  "RIDN"
//! version      u16      1
//! config       u8 in_channels, u32 num_eams, u32 channels, u32 reduction,
//!              4 × u32 dilations, f64 lambda, u8 ablation bits
//!              (bit0 lsc, bit1 ssc, bit2 lc, bit3 fa)
//! iteration    u64      optimizer steps taken so far
//! count        u32      number of tensor records
//! record*      u16 name length, UTF-8 name, u8 dtype (0 = f32),
//!              u8 rank, rank × u32 dims, f32 payload
//! crc          u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Records named `adam.m.<param>` / `adam.v.<param>` carry optimizer moments;
//! all other records are network parameters and must match the architecture
//! the embedded config describes.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Ablation, NetworkConfig, RidNet};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RIDN";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const MOMENT1_PREFIX: &str = "adam.m.";
const MOMENT2_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: RidNet<f32>,
    pub iteration: u64,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(net: RidNet<f32>) -> Self {
        Self {
            net,
            iteration: 0,
            optimizer: None,
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    let name = name.as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = ckpt.net.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cfg.in_channels as u8);
    for v in [cfg.num_eams, cfg.channels, cfg.reduction] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for d in cfg.dilations {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.lambda.to_le_bytes());
    out.push(cfg.ablation.to_bits());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());

    let params = ckpt.net.params();
    let moments = ckpt.optimizer.as_ref().map_or(0, |o| o.m.len() + o.v.len());
    out.extend_from_slice(&((params.len() + moments) as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, t) in params.names().iter().zip(&opt.m) {
            put_tensor(&mut out, &format!("{MOMENT1_PREFIX}{name}"), t);
        }
        for (name, t) in params.names().iter().zip(&opt.v) {
            put_tensor(&mut out, &format!("{MOMENT2_PREFIX}{name}"), t);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>), CheckpointError> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
        .to_string();
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(CheckpointError::UnsupportedDtype(dtype));
    }
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(CheckpointError::Truncated)?;
    let bytes = count.checked_mul(4).ok_or(CheckpointError::Truncated)?;
    if bytes > r.remaining() {
        return Err(CheckpointError::Truncated);
    }
    let data = r
        .take(bytes)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((name, t))
}

fn check_shape(
    name: &str,
    expected: &[usize],
    actual: &Tensor<f32>,
) -> Result<(), CheckpointError> {
    if expected != actual.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: expected.to_vec(),
            actual: actual.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(CheckpointError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < 10 {
        return Err(CheckpointError::Truncated);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 6 };
    let in_channels = r.u8()? as usize;
    let num_eams = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let reduction = r.u32()? as usize;
    let mut dilations = [0usize; 4];
    for d in &mut dilations {
        *d = r.u32()? as usize;
    }
    let lambda = r.f64()?;
    let bits = r.u8()?;
    let ablation = Ablation::from_bits(bits)
        .ok_or_else(|| CheckpointError::InvalidConfig(format!("ablation bits {bits:#x}")))?;
    let config = NetworkConfig {
        in_channels,
        num_eams,
        channels,
        reduction,
        dilations,
        lambda,
        ablation,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    // Bound the architecture by the bytes actually present before allocating it.
    let min_params = num_eams
        .checked_mul(channels)
        .and_then(|v| v.checked_mul(channels))
        .and_then(|v| v.checked_mul(4 * 9));
    if min_params.is_none_or(|v| v > body.len()) {
        return Err(CheckpointError::Truncated);
    }
    let iteration = r.u64()?;
    let count = r.u32()? as usize;

    let mut net =
        RidNet::<f32>::zeros(config).map_err(|e| CheckpointError::InvalidConfig(e.to_string()))?;
    let n = net.params().len();
    let mut seen = vec![false; n];
    let mut m: Vec<Option<Tensor<f32>>> = vec![None; n];
    let mut v: Vec<Option<Tensor<f32>>> = vec![None; n];

    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        let (slot_name, target) = if let Some(p) = name.strip_prefix(MOMENT1_PREFIX) {
            (p, Some(&mut m))
        } else if let Some(p) = name.strip_prefix(MOMENT2_PREFIX) {
            (p, Some(&mut v))
        } else {
            (name.as_str(), None)
        };
        let id = net
            .params()
            .position(slot_name)
            .ok_or_else(|| CheckpointError::UnexpectedTensor(name.clone()))?;
        let expected = net.params().get(id).shape().to_vec();
        check_shape(&name, &expected, &t)?;
        let i = id.index();
        match target {
            Some(moments) => {
                if moments[i].replace(t).is_some() {
                    return Err(CheckpointError::Malformed(format!(
                        "duplicate tensor `{name}`"
                    )));
                }
            }
            None => {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(CheckpointError::Malformed(format!(
                        "duplicate tensor `{name}`"
                    )));
                }
                net.params_mut().values_mut()[i] = t;
            }
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::MissingTensor(
            net.params().names()[i].clone(),
        ));
    }

    let have_m = m.iter().filter(|t| t.is_some()).count();
    let have_v = v.iter().filter(|t| t.is_some()).count();
    let optimizer = if have_m == 0 && have_v == 0 {
        None
    } else {
        let names = net.params().names();
        let collect = |slots: Vec<Option<Tensor<f32>>>, prefix: &str| {
            slots
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    t.ok_or_else(|| CheckpointError::MissingTensor(format!("{prefix}{}", names[i])))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        Some(AdamState {
            m: collect(m, MOMENT1_PREFIX)?,
            v: collect(v, MOMENT2_PREFIX)?,
            t: iteration,
        })
    };

    Ok(Checkpoint {
        net,
        iteration,
        optimizer,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
