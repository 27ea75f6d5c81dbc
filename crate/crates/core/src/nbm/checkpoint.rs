//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "FEDNBMCK"
//! version      u32      1
//! config_hash  u64
//! config       u32 length + UTF-8 JSON of the ModelConfig
//! tensors      u32 count, then per tensor:
//!                u32 name length + UTF-8 name
//!                u32 rank + rank x u64 dims
//!                u64 offset
//! values       u64 count + count x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParameters, TensorSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FEDNBMCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParameters) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&params.config_hash().to_le_bytes())?;
    let cfg = serde_json::to_vec(params.config()).expect("config serializes");
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let tensors = &params.layout().tensors;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&(t.offset as u64).to_le_bytes())?;
    }
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.at < n {
            return Err("truncated checkpoint".into());
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

/// Parses a checkpoint and validates its header against the stored config.
pub fn read_checkpoint<R: Read>(mut r: R) -> std::result::Result<ModelParameters, String> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| e.to_string())?;
    let mut c = Cursor { buf: &buf, at: 0 };
    if c.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hash = c.u64()?;
    let config: ModelConfig = serde_json::from_str(&c.string()?).map_err(|e| e.to_string())?;
    if config.config_hash() != hash {
        return Err(format!(
            "config hash mismatch: header {hash:016x}, config {:016x}",
            config.config_hash()
        ));
    }
    let n_tensors = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let offset = c.u64()? as usize;
        tensors.push(TensorSpec {
            name,
            shape,
            offset,
        });
    }
    let mut params = ModelParameters::zeros(&config).map_err(|e| e.to_string())?;
    if params.layout().tensors != tensors {
        return Err("tensor registry does not match the configured layout".into());
    }
    let n = c.u64()? as usize;
    if n != params.len() {
        return Err(format!(
            "{n} values stored, layout expects {}",
            params.len()
        ));
    }
    for v in params.values.iter_mut() {
        *v = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
    }
    if c.at != buf.len() {
        return Err("trailing bytes after parameter vector".into());
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParameters) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `expected` is given its config hash must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParameters> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let params = read_checkpoint(std::io::BufReader::new(f)).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })?;
    if let Some(cfg) = expected {
        if cfg.config_hash() != params.config_hash() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "checkpoint config hash {:016x} does not match expected {:016x}",
                    params.config_hash(),
                    cfg.config_hash()
                ),
            });
        }
    }
    Ok(params)
}
