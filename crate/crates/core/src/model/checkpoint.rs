//! Checkpoint file layout, all integers little-endian:
//!
//! ```text
//! "WSTR"  u32 version
//! u32 config_len  config_len bytes of canonical `key = value` text
//! u32 tensor_count
//! tensor_count × { u32 name_len, name, u32 rank, rank × u64 dim, numel × f32 }
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Module;

pub const CKPT_MAGIC: &[u8; 4] = b"WSTR";
pub const CKPT_VERSION: u32 = 1;

/// Table entry as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the f32 payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let cfg = model.config.to_text();
    let params = model.named_params();
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg.as_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &params {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data().iter() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Byte reader that knows its offset, for error messages.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read + Seek> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.offset;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| Error::Format {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn skip(&mut self, n: u64, what: &str) -> Result<()> {
        let end = self.inner.seek(SeekFrom::End(0)).map_err(|e| Error::Format {
            offset: self.offset,
            msg: e.to_string(),
        })?;
        if self.offset + n > end {
            return Err(Error::Format {
                offset: self.offset,
                msg: format!("truncated inside {what}: need {n} bytes, {} remain", end - self.offset),
            });
        }
        self.offset += n;
        self.inner.seek(SeekFrom::Start(self.offset)).map(|_| ()).map_err(|e| Error::Format {
            offset: self.offset,
            msg: e.to_string(),
        })
    }
}

fn open(path: &Path) -> Result<Cursor<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(Cursor {
        inner: BufReader::new(file),
        offset: 0,
    })
}

/// Read header and tensor table, seeking past every payload.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let mut c = open(path)?;
    let magic = c.bytes(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"WSTR\""),
        });
    }
    let version = c.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {CKPT_VERSION}"),
        });
    }
    let cfg_len = c.u32("config length")? as usize;
    let config_text = c.string(cfg_len, "config text")?;
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = c.u32("tensor name length")? as usize;
        let name = c.string(name_len, "tensor name")?;
        let rank = c.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u64("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = c.offset;
        let numel: usize = shape.iter().product();
        c.skip(numel as u64 * 4, &format!("payload of tensor {i} '{name}'"))?;
        tensors.push(TensorEntry { name, shape, offset });
    }
    Ok(CheckpointInfo {
        version,
        config_text,
        tensors,
    })
}

/// Rebuild the model from the stored config and fill in every parameter.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let info = inspect_checkpoint(path)?;
    let cfg = ModelConfig::from_text(&info.config_text)?;
    let model = build_model(&cfg)?;
    let table: BTreeMap<&str, &TensorEntry> = info.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let params = model.named_params();
    for e in &info.tensors {
        if !params.iter().any(|(n, _)| *n == e.name) {
            return Err(Error::Format {
                offset: e.offset,
                msg: format!("unexpected tensor '{}' for this config", e.name),
            });
        }
    }
    let mut c = open(path)?;
    for (name, t) in &params {
        let e = table.get(name.as_str()).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("missing tensor '{name}'"),
        })?;
        if e.shape != t.shape() {
            return Err(Error::Format {
                offset: e.offset,
                msg: format!("tensor '{name}' has shape {:?}, model expects {:?}", e.shape, t.shape()),
            });
        }
        c.inner.seek(SeekFrom::Start(e.offset)).map_err(|err| Error::io(path, err))?;
        c.offset = e.offset;
        let raw = c.bytes(t.numel() * 4, name)?;
        let mut data = t.data_mut()?;
        for (dst, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}
