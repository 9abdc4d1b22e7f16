//! Little-endian binary container for per-node vectors.
//!
//! ```text
//! magic   "LTHE"        4 bytes
//! version u32 = 1
//! dim     u32
//! count   u64
//! count × [kind u8][ordinal u64][dim × f64]
//! ```
//!
//! Kinds 0 and 1 are descriptions and comments; dumps of propagated
//! embeddings also use 2 (user) and 3 (item).

use std::io::Write;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTHE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub kind: u8,
    pub ordinal: u64,
    pub values: Vec<f64>,
}

/// Writes a complete container. Every record must carry `dim` finite values.
pub fn write_records<W: Write>(mut out: W, dim: usize, records: &[VectorRecord]) -> Result<()> {
    if dim == 0 || dim > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("vector dimension {dim} out of range")));
    }
    for r in records {
        if r.values.len() != dim {
            return Err(Error::Dimension { expected: dim, actual: r.values.len() });
        }
        if let Some(v) = r.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("kind {} ordinal {}: {v}", r.kind, r.ordinal)));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * (9 + 8 * dim));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        buf.push(r.kind);
        buf.extend_from_slice(&r.ordinal.to_le_bytes());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: needed {n} more bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail(&self, message: String) -> Error {
        Error::Format { what: "vector container", offset: self.pos as u64, message }
    }
}

/// Parses a container, returning its dimension and records in file order.
pub fn read_records(bytes: &[u8]) -> Result<(usize, Vec<VectorRecord>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        c.pos -= 4;
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let dim = c.u32()? as usize;
    if dim == 0 {
        c.pos -= 4;
        return Err(c.fail("zero dimension".into()));
    }
    let count = c.u64()?;
    let record_len = 9 + 8 * dim as u64;
    let remaining = (bytes.len() - c.pos) as u64;
    if count.checked_mul(record_len).is_none_or(|need| need > remaining) {
        return Err(c.fail(format!("truncated: header declares {count} records of {record_len} bytes, {remaining} bytes left")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kind = c.take(1)?[0];
        let ordinal = c.u64()?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = c.pos;
            let v = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                c.pos = at;
                return Err(c.fail(format!("non-finite value {v}")));
            }
            values.push(v);
        }
        records.push(VectorRecord { kind, ordinal, values });
    }
    if c.pos != bytes.len() {
        return Err(c.fail(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((dim, records))
}
