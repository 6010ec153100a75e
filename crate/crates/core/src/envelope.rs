//! The "ATRL" binary envelope shared by checkpoints and spectral files.
//!
//! Layout: magic `ATRL`, format version (u32), a 4-byte section tag, then a
//! section-specific body. All integers and floats are little-endian.

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ATRL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("expected section {expected:?}, found {found:?}")]
    WrongSection { expected: String, found: String },
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid contents: {0}")]
    Invalid(String),
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_header(tag: &[u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.buf.extend_from_slice(tag);
        w
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

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Checks magic, version and section tag.
    pub fn with_header(buf: &'a [u8], tag: &[u8; 4]) -> Result<Self, EnvelopeError> {
        let mut r = Self::new(buf);
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(EnvelopeError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EnvelopeError::UnsupportedVersion(version));
        }
        let found = r.take(4)?;
        if found != tag {
            return Err(EnvelopeError::WrongSection {
                expected: String::from_utf8_lossy(tag).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(r)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], EnvelopeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(EnvelopeError::Truncated(self.buf.len())),
        }
    }

    pub fn u8(&mut self) -> Result<u8, EnvelopeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, EnvelopeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, EnvelopeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, EnvelopeError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| EnvelopeError::Invalid(format!("size {v} too large")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, EnvelopeError> {
        let bytes = self.take(n.checked_mul(8).ok_or(EnvelopeError::Truncated(self.buf.len()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String, EnvelopeError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| EnvelopeError::Invalid(e.to_string()))
    }

    pub fn expect_end(&self) -> Result<(), EnvelopeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(EnvelopeError::Invalid(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let mut w = Writer::with_header(b"TEST");
        w.f64(1.5);
        let bytes = w.finish();
        let mut r = Reader::with_header(&bytes, b"TEST").unwrap();
        assert_eq!(r.f64s(1).unwrap(), vec![1.5]);
        r.expect_end().unwrap();
        assert!(matches!(
            Reader::with_header(&bytes, b"MODL"),
            Err(EnvelopeError::WrongSection { .. })
        ));
        assert!(matches!(
            Reader::with_header(&bytes[..6], b"TEST"),
            Err(EnvelopeError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Reader::with_header(&bad, b"TEST"),
            Err(EnvelopeError::BadMagic(_))
        ));
    }
}
