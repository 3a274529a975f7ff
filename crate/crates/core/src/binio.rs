//! Little-endian helpers shared by the artifact file formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn magic(&mut self, magic: &[u8]) -> Result<()> {
        self.inner.write_all(magic)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_u8(v)?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_u32::<LittleEndian>(v)?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_u64::<LittleEndian>(v)?;
        Ok(())
    }

    /// Writes values as `f32`; callers keep parameters on the f32 grid so
    /// this is lossless.
    pub fn f32_slice(&mut self, values: &[f64]) -> Result<()> {
        for &v in values {
            self.inner.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    pub fn expect_magic(&mut self, magic: &'static [u8], expected: &'static str) -> Result<()> {
        let mut buf = vec![0u8; magic.len()];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::from_read(e, self.what))?;
        if buf != magic {
            return Err(Error::BadMagic { expected });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.inner.read_u8().map_err(|e| Error::from_read(e, self.what))
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.inner
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::from_read(e, self.what))
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.inner
            .read_u64::<LittleEndian>()
            .map_err(|e| Error::from_read(e, self.what))
    }

    pub fn f32_vec(&mut self, len: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0f32; len];
        self.inner
            .read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|e| Error::from_read(e, self.what))?;
        Ok(buf.into_iter().map(f64::from).collect())
    }

    pub fn bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::from_read(e, self.what))?;
        Ok(buf)
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.bytes(len)?;
        String::from_utf8(bytes)
            .map_err(|_| Error::InvalidInput(format!("{} file holds a non-UTF-8 string", self.what)))
    }

    /// Fails unless the stream is fully consumed.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::ShapeMismatch(format!(
                "trailing bytes after {} payload",
                self.what
            ))),
        }
    }
}

/// Rounds a value to the nearest `f32`, the precision of every on-disk artifact.
#[inline]
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

pub fn snap_to_f32(values: &mut [f64]) {
    for v in values {
        *v = to_f32_grid(*v);
    }
}
