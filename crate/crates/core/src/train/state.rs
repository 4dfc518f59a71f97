//! Resumable training state, little-endian:
//!
//! ```text
//! "WSTS"  u32 version  u64 step  u64 stream_position  u64 adam_t
//! u32 config_len  config text
//! u32 count  count × { u32 name_len, name, u64 numel, numel × f64 param, m, v }
//! ```
//!
//! Values are stored at full precision so a resumed run continues bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::AdamW;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Module;

pub const STATE_MAGIC: &[u8; 4] = b"WSTS";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    /// Index of the next batch in the stream.
    pub position: u64,
}

pub fn save_train_state(path: &Path, model: &Model, opt: &AdamW, step: u64, position: u64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let cfg = model.config.to_text();
    let params = model.named_params();
    w.write_all(STATE_MAGIC).map_err(io)?;
    w.write_all(&STATE_VERSION.to_le_bytes()).map_err(io)?;
    for v in [step, position, opt.t] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg.as_bytes()).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (k, (name, p)) in params.iter().enumerate() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(p.numel() as u64).to_le_bytes()).map_err(io)?;
        for xs in [&p.data()[..], &opt.m[k], &opt.v[k]] {
            for x in xs {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
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

    fn f64s(&mut self, dst: &mut [f64], what: &str) -> Result<()> {
        let raw = self.bytes(dst.len() * 8, what)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

/// Restore parameters of `model` and moments of `opt` from `path`. The model
/// must have been built from the same config.
pub fn load_train_state(path: &Path, model: &Model, opt: &mut AdamW) -> Result<TrainState> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let fail = |offset, msg: String| Error::Format { offset, msg };
    if r.bytes(4, "magic")? != STATE_MAGIC {
        return Err(fail(0, "not a training state file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != STATE_VERSION {
        return Err(fail(4, format!("unsupported state version {version}")));
    }
    let step = r.u64("step")?;
    let position = r.u64("stream position")?;
    let t = r.u64("optimizer step count")?;
    let len = r.u32("config length")? as usize;
    let at = r.offset;
    let cfg = String::from_utf8(r.bytes(len, "config")?).map_err(|_| fail(at, "config is not UTF-8".into()))?;
    if cfg != model.config.to_text() {
        return Err(fail(at, "state was saved for a different model config".into()));
    }
    let params = model.named_params();
    let at = r.offset;
    let count = r.u32("tensor count")? as usize;
    if count != params.len() || opt.m.len() != params.len() {
        return Err(fail(at, format!("state holds {count} tensors, model has {}", params.len())));
    }
    for (k, (name, p)) in params.iter().enumerate() {
        let at = r.offset;
        let n = r.u32("name length")? as usize;
        let stored = String::from_utf8(r.bytes(n, "name")?).map_err(|_| fail(at, "name is not UTF-8".into()))?;
        if stored != *name {
            return Err(fail(at, format!("expected tensor '{name}', found '{stored}'")));
        }
        let numel = r.u64("element count")? as usize;
        if numel != p.numel() {
            return Err(fail(at, format!("tensor '{name}' has {numel} elements, model expects {}", p.numel())));
        }
        r.f64s(&mut p.data_mut()?, name)?;
        r.f64s(&mut opt.m[k], name)?;
        r.f64s(&mut opt.v[k], name)?;
    }
    opt.t = t;
    Ok(TrainState { step, position })
}
