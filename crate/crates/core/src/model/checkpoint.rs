//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "UNESTCKP" u32 version
//! u32 len, config JSON
//! u32 count, then per tensor: u32 len, name, u32 ndim, u32 dims..., f32 data...
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::config::UNesTConfig;
use super::params::ModelWeights;

pub const MAGIC: &[u8; 8] = b"UNESTCKP";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Internal(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<T: Scalar>(cfg: &UNesTConfig, weights: &ModelWeights<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Internal(e.to_string()))?;
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    put_u32(&mut buf, weights.len())?;
    for (name, t) in weights.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(field, "unexpected end of file"));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(UNesTConfig, ModelWeights<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let len = r.u32("config")?;
    let cfg: UNesTConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    let count = r.u32("count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("ndim")?;
        let shape = (0..ndim)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format("dims", format!("{name}: shape {shape:?} overflows")))?;
        let bytes = r.take(numel.saturating_mul(4), "data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("data", "trailing bytes after last tensor"));
    }
    Ok((cfg, ModelWeights::from_named(entries)))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save<T: Scalar>(path: &Path, cfg: &UNesTConfig, weights: &ModelWeights<T>) -> Result<()> {
    let bytes = encode(cfg, weights)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(UNesTConfig, ModelWeights<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
