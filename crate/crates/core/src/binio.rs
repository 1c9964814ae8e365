//! Little-endian primitives shared by the dataset and checkpoint formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Reader { inner, what }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated(self.what),
            _ => Error::Io(e),
        })
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        self.fill(&mut found)?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::VersionMismatch { expected, found });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        // Grow incrementally so a corrupt length cannot force a huge allocation.
        let mut out = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut out)?;
        if got != n {
            return Err(Error::Truncated(self.what));
        }
        Ok(out)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or(Error::Truncated(self.what))?;
        let raw = self.bytes(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64s(w: &mut impl Write, data: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn dim_u32(what: &'static str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit in u32")))
}
