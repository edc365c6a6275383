//! Little-endian byte encoding shared by the on-disk formats.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }

    pub fn str(&mut self, s: &str) {
        self.len_u32(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn reals<T: Real>(&mut self, vals: &[T]) {
        self.buf.reserve(vals.len() * T::DTYPE.size());
        for v in vals {
            v.write_le(&mut self.buf);
        }
    }
}

/// Cursor over a byte slice. `base` is the absolute file offset of `data[0]` so errors point
/// at real file positions.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    base: u64,
    record: Option<String>,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], base: u64) -> Self {
        Self {
            data,
            pos: 0,
            base,
            record: None,
        }
    }

    pub fn set_record(&mut self, record: impl Into<String>) {
        self.record = Some(record.into());
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.offset(), self.record.as_deref(), msg)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A u32 count that must not promise more elements of `elem_size` bytes than remain.
    pub fn count(&mut self, elem_size: usize, what: &str) -> Result<usize> {
        let n = self.u32(what)? as usize;
        if n.saturating_mul(elem_size.max(1)) > self.remaining() {
            return Err(self.err(format!(
                "{what} = {n} overruns the remaining {} bytes",
                self.remaining()
            )));
        }
        Ok(n)
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.count(1, what)?;
        let at = self.offset();
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| {
            Error::format(
                at,
                self.record.as_deref(),
                format!("{what} is not valid utf-8"),
            )
        })
    }

    pub fn reals<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let w = T::DTYPE.size();
        let len = n
            .checked_mul(w)
            .ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(w).map(T::read_le).collect())
    }
}

pub(crate) fn crc32(parts: &[&[u8]]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for p in parts {
        h.update(p);
    }
    h.finalize()
}
