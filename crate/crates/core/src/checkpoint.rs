//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//! `"DPSP"`, `u32` version, `u32` metadata length, metadata text
//! (`key=value` lines), `u32` tensor count, then per tensor `u32` name
//! length, name, `u8` dtype tag, `u32` rank, `u64` extents; finally the
//! raw tensor data in header order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Real, Tensor};
use crate::tasnet::{ModelConfig, SeparatorModel};

pub const MAGIC: &[u8; 4] = b"DPSP";
pub const VERSION: u32 = 1;

/// Ordered `key=value` metadata stored in a checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{l}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Metadata { entries })
    }

    pub fn for_model(config: &ModelConfig) -> Self {
        let mut m = Metadata::default();
        m.set("num_filters", config.num_filters);
        m.set("window", config.window);
        m.set("stride", config.stride());
        m.set("num_sources", config.num_sources);
        m.set("num_blocks", config.num_blocks);
        m.set("hidden", config.hidden);
        m.set("chunk_len", config.chunk_len.map_or("auto".to_string(), |k| k.to_string()));
        m.set("sample_rate", config.sample_rate);
        m
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        fn num<T: std::str::FromStr>(m: &Metadata, key: &str) -> Result<T> {
            m.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not a number")))
        }
        let chunk_len = match self.get("chunk_len") {
            None | Some("auto") => None,
            Some(_) => Some(num(self, "chunk_len")?),
        };
        let config = ModelConfig {
            num_filters: num(self, "num_filters")?,
            window: num(self, "window")?,
            num_sources: num(self, "num_sources")?,
            num_blocks: num(self, "num_blocks")?,
            hidden: num(self, "hidden")?,
            chunk_len,
            sample_rate: num(self, "sample_rate")?,
        };
        config.validate()?;
        if let Some(s) = self.get("stride") {
            if s != config.stride().to_string() {
                return Err(Error::Checkpoint(format!(
                    "stored stride {s} disagrees with window {}",
                    config.window
                )));
            }
        }
        Ok(config)
    }
}

/// Serializes named tensors with metadata.
pub fn encode<F: Real>(meta: &Metadata, tensors: &[(String, &Tensor<F>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = meta.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn read_as<F: Real>(bytes: &[u8], dtype: DType) -> F {
    match dtype {
        DType::F32 => F::of(f32::read_le(bytes) as f64),
        DType::F64 => F::of(f64::read_le(bytes)),
    }
}

/// Parses a checkpoint, converting stored data to `F`.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<(Metadata, Vec<(String, Tensor<F>)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = Metadata::parse(&r.text(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut header = Vec::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.text(n)?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        header.push((name, dtype, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dtype, shape) in header {
        let len: usize = shape.iter().product();
        let size = dtype.size();
        let raw = r.take(len.checked_mul(size).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(size).map(|c| read_as::<F>(c, dtype)).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((meta, tensors))
}

/// Writes a model with its architecture plus `extra` metadata.
pub fn save_model<F: Real>(path: impl AsRef<Path>, model: &SeparatorModel<F>, extra: &Metadata) -> Result<()> {
    let mut meta = Metadata::for_model(&model.config);
    for (k, v) in &extra.entries {
        meta.set(k.clone(), v);
    }
    let bytes = encode(&meta, &model.named_params());
    let path = path.as_ref();
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model<F: Real>(path: impl AsRef<Path>) -> Result<(SeparatorModel<F>, Metadata)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = decode::<F>(&bytes)?;
    let config = meta.model_config()?;
    let mut model = SeparatorModel::<F>::new(config, 0)?;
    let mut stored: BTreeMap<String, Tensor<F>> = tensors.into_iter().collect();
    let mut missing = Vec::new();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut idx = 0;
    let mut mismatch = None;
    model.visit_mut(&mut |p| {
        let name = &names[idx];
        idx += 1;
        match stored.remove(name) {
            Some(t) if t.shape() == p.shape() => *p = t,
            Some(t) => {
                mismatch.get_or_insert(format!("{name}: stored {:?}, expected {:?}", t.shape(), p.shape()));
            }
            None => missing.push(name.clone()),
        }
    });
    if let Some(m) = mismatch {
        return Err(Error::Checkpoint(m));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    Ok((model, meta))
}
