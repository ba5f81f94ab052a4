//! Binary parameter container.
//!
//! ```text
//! "WSBS"  u32 version  u32 entry_count
//! per entry, sorted by name:
//!   u32 name_len  name (UTF-8)  u8 dtype (0 = f32, 1 = f64)
//!   u32 rank  u64 dims[rank]  values (little-endian)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Integers are little-endian. Entries are written in name order, so saving
//! the same parameters always yields the same bytes. Batch-norm running
//! statistics are recognized on load by their `.running_*` suffix.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::LayerParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WSBS";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn encode(params: &LayerParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<LayerParams> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a WSBS checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = LayerParams::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            d => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {d}"))),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let res = if is_buffer_name(&name) {
            params.insert_buffer(name.clone(), t)
        } else {
            params.insert(name.clone(), t)
        };
        res.map_err(|_| Error::Checkpoint(format!("duplicate entry {name}")))?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            body.len() - r.pos
        )));
    }
    Ok(params)
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn save(params: &LayerParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<LayerParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies every entry of `src` whose name exists in `dst`.
///
/// Shape disagreements on shared names are an incompatibility listing each
/// offending path; names present on only one side are skipped. Returns the
/// number of entries copied.
pub fn warm_start(dst: &mut LayerParams, src: &LayerParams) -> Result<usize> {
    let mut bad = Vec::new();
    for (name, t) in src.iter() {
        if let Ok(d) = dst.get(name) {
            if d.shape() != t.shape() {
                bad.push(format!("{name}: expected {:?}, found {:?}", d.shape(), t.shape()));
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Incompatible { paths: bad });
    }
    let mut n = 0;
    for (name, t) in src.iter() {
        if dst.contains(name) {
            dst.set(name, t.clone())?;
            n += 1;
        }
    }
    Ok(n)
}
