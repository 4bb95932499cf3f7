//! Binary tensor files for models and Fisher estimates.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SOHWMTF\0"
//! u32    header length, then header JSON
//! u32    entry count
//! entry* u32 path length, path bytes (UTF-8), u8 kind (0 trainable, 1 buffer),
//!        u32 rank, u64 dims[rank], f32 data[product(dims)]
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::model::{Architecture, Model};
use super::params::{Param, ParamKind, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SOHWMTF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Model,
    Fisher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: FileKind,
    pub version: u32,
    pub architecture: Architecture,
    pub net_config: NetConfig,
}

pub fn write_tensors<'a>(path: &Path, header: &Header, entries: impl IntoIterator<Item = &'a Param>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    let json = serde_json::to_vec(header)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let entries: Vec<&Param> = entries.into_iter().collect();
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for p in entries {
        out.write_all(&(p.path.len() as u32).to_le_bytes())?;
        out.write_all(p.path.as_bytes())?;
        out.write_all(&[match p.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        }])?;
        out.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &p.data {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_tensors(path: &Path) -> Result<(Header, Vec<Param>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a tensor file"));
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header.version)));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let plen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(plen)?)
            .map_err(|_| Error::format(path, "tensor path is not UTF-8"))?
            .to_string();
        let kind = match r.take(1)?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::format(path, format!("unknown tensor kind {k}"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(Param {
            path: name,
            shape,
            kind,
            data,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok((header, params))
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: FileKind::Model,
            version: FORMAT_VERSION,
            architecture: self.architecture(),
            net_config: self.config().clone(),
        };
        write_tensors(path, &header, self.params.iter())
    }

    /// Load a model. When `expected` is given, any configuration difference
    /// is reported field by field.
    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Model> {
        let (header, params) = read_tensors(path)?;
        if header.kind != FileKind::Model {
            return Err(Error::format(path, "file holds a Fisher estimate, not a model"));
        }
        if let Some(cfg) = expected {
            let diff = cfg.differing_fields(&header.net_config);
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint {} was saved with a different configuration (fields: {})",
                    path.display(),
                    diff.join(", ")
                )));
            }
        }
        let mut store = ParamStore::new();
        for p in params {
            if store.id_of(&p.path).is_some() {
                return Err(Error::format(path, format!("duplicate tensor {}", p.path)));
            }
            store.add(p.path, &p.shape, p.kind, p.data);
        }
        Model::from_params(&header.net_config, header.architecture, store)
    }
}
