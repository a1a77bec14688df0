//! `.afed` checkpoint files: named `f64` arrays in a versioned container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AFED" | version u32 | record count u32 |
//!   { name length u32 | name (UTF-8) | rank u32 | extents u64 × rank | data f64 × numel } …
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{load_flat, named_tensors, Params};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFED";
pub const VERSION: u32 = 1;

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("missing AFED magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let count = r.u32("record count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("record {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("record {name}: implausible shape {shape:?}")))?;
        let raw = r.take(numel * 8, "data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

/// Records whose names start with `prefix`, with the prefix stripped.
pub fn with_prefix(records: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    records.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect()
}

/// Every leaf of `params` under `prefix`.
pub fn records_of<T: Params<Tensor>>(params: &T, prefix: &str) -> Vec<(String, Tensor)> {
    named_tensors(params).into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

/// Loads the leaves of `params` from records named exactly as its paths.
/// Extra records are ignored; missing ones are an error.
pub fn restore<T: Params<Tensor>>(params: &mut T, records: &[(String, Tensor)]) -> Result<()> {
    let names: Vec<String> = named_tensors(params).into_iter().map(|(n, _)| n).collect();
    let mut values = Vec::with_capacity(names.len());
    for n in &names {
        match records.iter().find(|(r, _)| r == n) {
            Some((_, t)) => values.push(t.clone()),
            None => return Err(Error::Format(format!("checkpoint has no record {n}"))),
        }
    }
    load_flat(params, values).map_err(|e| Error::Format(e.to_string()))
}
