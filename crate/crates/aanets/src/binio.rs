//! Offset-tracking binary reads shared by the fixed-layout file formats.

use std::io::Read;

use crate::error::{Error, Result};

/// Wraps a reader, tracking the byte offset so truncation and corruption
/// errors can say where they happened.
pub(crate) struct CountingReader<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            msg: format!("unexpected end of file: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b)?;
        Ok(b[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}
