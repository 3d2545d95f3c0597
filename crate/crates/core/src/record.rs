//! Flat key-value checkpoint records.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! magic    b"PNRC"
//! version  u32 (= 1)
//! entries  u32
//! entry*   key_len u32, key utf-8 bytes, count u64, count x f64
//! ```
//!
//! Entries are written in ascending key order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PNRC";
pub const VERSION: u32 = 1;

pub type Record = BTreeMap<String, Vec<f64>>;

pub fn encode(record: &Record) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    for (key, values) in record {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated record")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Record, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let entries = r.u32()?;
    let mut record = Record::new();
    for _ in 0..entries {
        let klen = r.u32()? as usize;
        let key = std::str::from_utf8(r.take(klen)?).map_err(|_| "key is not utf-8")?.to_string();
        let count = usize::try_from(r.u64()?).map_err(|_| "entry too large")?;
        let raw = r.take(count.checked_mul(8).ok_or("entry too large")?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if record.insert(key.clone(), values).is_some() {
            return Err(format!("duplicate key {key}"));
        }
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(record)
}

pub fn read(path: &Path) -> Result<Record> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Format { path: path.display().to_string(), reason })
}

/// Fetches `key`, checking its length when `expected` is given.
pub fn get<'a>(record: &'a Record, key: &str, expected: Option<usize>) -> Result<&'a [f64]> {
    let v = record.get(key).ok_or_else(|| Error::Mismatch(format!("missing checkpoint entry `{key}`")))?;
    if let Some(len) = expected {
        if v.len() != len {
            return Err(Error::Mismatch(format!("entry `{key}` has {} values, expected {len}", v.len())));
        }
    }
    Ok(v)
}
