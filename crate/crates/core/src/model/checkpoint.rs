//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "PXDTCKPT"
//! version      u32       CHECKPOINT_VERSION
//! header_len   u32       byte length of the header
//! header       UTF-8     TOML document (model config plus run metadata)
//! count        u32       number of records
//! record*      name_len u32, name bytes (UTF-8),
//!              ndim u32, ndim × u64 extents,
//!              numel × f32 values in row-major order
//! ```
//!
//! Records keep insertion order, and the header is rendered from a sorted
//! table, so writing a loaded checkpoint reproduces the input bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::pixeldit::PixelDit;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PXDTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix of raw parameter records.
pub const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: toml::Table,
    pub records: Vec<(String, Tensor)>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(parse_err(self.pos, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| parse_err(at, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(header: toml::Table) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.records.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// All records whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.records
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header).map_err(|e| Error::Config(format!("header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(parse_err(0, "not a checkpoint (bad magic)"));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(parse_err(8, format!("unsupported checkpoint version {version}")));
        }
        let len = cur.u32("header length")? as usize;
        let at = cur.pos;
        let text = cur.string(len, "header")?;
        let header: toml::Table = toml::from_str(&text).map_err(|e| parse_err(at, format!("header: {e}")))?;
        let count = cur.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = cur.u32("record name length")? as usize;
            let name = cur.string(n, "record name")?;
            let at = cur.pos;
            let ndim = cur.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(cur.u64("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = match numel {
                Some(n) if n > 0 && n.checked_mul(4).is_some() => n,
                _ => return Err(parse_err(at, format!("record {name} has invalid shape {shape:?}"))),
            };
            let raw = cur.take(numel * 4, "record data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            records.push((name, Tensor::new(&shape, data)?));
        }
        if cur.pos != buf.len() {
            return Err(parse_err(cur.pos, "trailing bytes after last record"));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// The `[model]` table parsed back into a config.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let table = self
            .header
            .get("model")
            .ok_or_else(|| Error::Config("checkpoint header has no [model] table".into()))?;
        table
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("checkpoint model config: {e}")))
    }

    /// Integer header field, if present.
    pub fn header_u64(&self, key: &str) -> Option<u64> {
        self.header.get(key).and_then(|v| v.as_integer()).map(|v| v as u64)
    }

    /// Copy records named `{prefix}{param}` into `store`, requiring every
    /// parameter to be present with a matching shape.
    pub fn restore_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for i in 0..store.len() {
            let name = store.names()[i].clone();
            let key = format!("{prefix}{name}");
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing {key}")))?;
            let id = store.id(&name).expect("own name");
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }
}

/// Header table carrying a model config.
pub fn model_header(config: &ModelConfig) -> Result<toml::Table> {
    let model = toml::Table::try_from(config).map_err(|e| Error::Config(format!("model config: {e}")))?;
    let mut header = toml::Table::new();
    header.insert("model".into(), toml::Value::Table(model));
    Ok(header)
}

impl PixelDit {
    /// Checkpoint holding the config and the raw parameters.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(model_header(&self.config)?);
        ck.push_params(PARAM_PREFIX, &self.params);
        Ok(ck)
    }

    /// Rebuild a model from `ck`, taking parameters under `prefix`.
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut model = PixelDit::new(ck.model_config()?, 0)?;
        ck.restore_params(prefix, &mut model.params)?;
        Ok(model)
    }
}
