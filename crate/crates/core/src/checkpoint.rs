//! Parameter checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "AUGSUB01"
//! count     u32       number of records
//! record*   u16 name length, name (UTF-8), u8 rank, rank × u32 extents,
//!           prod(extents) × f32 values
//! crc       u32       CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! The first record is `meta.vit-config`, nine values: image size, patch
//! size, channels, dim, depth, heads, MLP ratio, classes, class token flag.
//! Parameter records follow in store order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ParamStore, VitConfig};

pub const MAGIC: &[u8; 8] = b"AUGSUB01";
const META: &str = "meta.vit-config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: VitConfig,
    pub params: ParamStore<f32>,
}

fn config_values(c: &VitConfig) -> Vec<f32> {
    [
        c.image_size as f64,
        c.patch_size as f64,
        c.channels as f64,
        c.dim as f64,
        c.depth as f64,
        c.heads as f64,
        c.mlp_ratio,
        c.classes as f64,
        f64::from(u8::from(c.class_token)),
    ]
    .iter()
    .map(|&v| v as f32)
    .collect()
}

fn config_from(v: &[f32]) -> Result<VitConfig> {
    if v.len() != 9 {
        return Err(Error::Format(format!("{META} has {} values, expected 9", v.len())));
    }
    let int = |x: f32| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::Format(format!("{META} holds non-integer extent {x}")))
        }
    };
    Ok(VitConfig {
        image_size: int(v[0])?,
        patch_size: int(v[1])?,
        channels: int(v[2])?,
        dim: int(v[3])?,
        depth: int(v[4])?,
        heads: int(v[5])?,
        mlp_ratio: v[6] as f64,
        classes: int(v[7])?,
        class_token: v[8] != 0.0,
    })
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(config: &VitConfig, params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.num_scalars());
    out.extend(MAGIC);
    out.extend(((params.len() + 1) as u32).to_le_bytes());
    put_record(&mut out, META, &[9], &config_values(config));
    for (name, t) in params.iter() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not an AUGSUB01 checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checkpoint CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut config = None;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if name == META {
            config = Some(config_from(&data)?);
        } else {
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
            params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    let config = config.ok_or_else(|| Error::Format(format!("missing {META} record")))?;
    Ok(Checkpoint { config, params })
}

/// Writes the checkpoint and returns its CRC.
pub fn save(path: &Path, config: &VitConfig, params: &ParamStore<f32>) -> Result<u32> {
    let bytes = encode(config, params);
    fs::write(path, &bytes)?;
    Ok(checksum(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// CRC-32 of an encoded checkpoint, the value held in its last four bytes.
pub fn checksum(bytes: &[u8]) -> u32 {
    crc32fast::hash(&bytes[..bytes.len().saturating_sub(4)])
}
