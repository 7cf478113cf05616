//! Binary checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TOSA"  u32 version
//! u32 n   n bytes of UTF-8 config text ([model] section, key = value lines)
//! u32 count
//! count × { u32 name_len, name, u32 rank, rank × u32 extent, numel × f64 }
//! ```
//!
//! The decoder treats its input as untrusted: every length is checked
//! against the bytes that remain before anything is allocated.

use std::collections::BTreeMap;

use super::{DenseHead, Model, ModelConfig, ModelState};
use crate::config::Document;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TOSA";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;
const MAX_NAME: usize = 256;

pub fn encode_checkpoint(config: &ModelConfig, state: &ModelState) -> Vec<u8> {
    let text = Document {
        sections: vec![config.to_section()],
    }
    .render();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    let mut records = Vec::new();
    state.for_each_named(&mut |n, t| records.push((n.to_string(), t.clone())));
    put_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} ({n} bytes needed, {remaining} left)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}, expected \"TOSA\"")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let text_len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(text_len, "config block")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = parse_config(text)?;

    // Refuse configs whose weights could not fit in the rest of the file
    // before allocating the template.
    let needed = 8 * min_params(&config);
    if needed > r.remaining() as u128 {
        return Err(Error::Checkpoint(format!(
            "config needs at least {needed} bytes of weights but only {} follow",
            r.remaining()
        )));
    }
    let template = ModelState::init(&config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    template.for_each_named(&mut |n, t| {
        expected.insert(n.to_string(), t.shape().to_vec());
    });
    expected.insert("dense.weight".into(), vec![config.dim, 1]);
    expected.insert("dense.bias".into(), vec![1]);

    let count = r.u32("record count")?;
    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32("name length")?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("record {i}: name length {name_len} out of range")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let Some(want) = expected.get(&name) else {
            return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
        };
        if *want != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, config implies {want:?}")));
        }
        if loaded.contains_key(&name) {
            return Err(Error::Checkpoint(format!("parameter {name} stored twice")));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &name)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{name} holds non-finite values")));
        }
        loaded.insert(name, Tensor::new(shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last record", r.remaining())));
    }

    let mut state = template;
    let has_dense = loaded.contains_key("dense.weight") || loaded.contains_key("dense.bias");
    if has_dense {
        state.dense = Some(DenseHead {
            weight: Tensor::zeros([config.dim, 1]),
            bias: Tensor::zeros([1]),
        });
    }
    let mut missing = None;
    state.for_each_named_mut(&mut |n, t| match loaded.remove(n) {
        Some(v) => *t = v,
        None => {
            missing.get_or_insert_with(|| n.to_string());
        }
    });
    if let Some(n) = missing {
        return Err(Error::Checkpoint(format!("parameter {n} missing")));
    }
    Ok(Model { config, state })
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let wrap = |e: Error| Error::Checkpoint(format!("config block: {e}"));
    let doc = Document::parse(text).map_err(wrap)?;
    if doc.sections.len() != 1 {
        return Err(Error::Checkpoint("config block must hold exactly one [model] section".into()));
    }
    let section = doc
        .section("model")
        .ok_or_else(|| Error::Checkpoint("config block lacks a [model] section".into()))?;
    let cfg = ModelConfig::from_section(section, &ModelConfig::default()).map_err(wrap)?;
    // Every field must be spelled out; defaults would make the file depend
    // on the reading build.
    let mut keys: Vec<&str> = section.entries.iter().map(|e| e.key.as_str()).collect();
    keys.sort_unstable();
    let mut want: Vec<String> = cfg.to_section().entries.into_iter().map(|e| e.key).collect();
    want.sort_unstable();
    if keys != want.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Checkpoint("config block does not list every model field".into()));
    }
    Ok(cfg)
}

/// Lower bound on the parameter count, overflow-free for any `u32` fields.
fn min_params(c: &ModelConfig) -> u128 {
    let w = |v: usize| v as u128;
    let grid = w(c.image_size) / w(c.patch_size).max(1);
    let tokens = grid * grid + 1;
    let patch_dim = w(c.channels) * w(c.patch_size) * w(c.patch_size);
    (tokens + patch_dim + w(c.num_classes)) * w(c.dim) + w(c.depth) * 12 * w(c.dim) * w(c.dim)
}
