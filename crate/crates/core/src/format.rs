//! Binary container shared by map files and frame logs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes
//! version     u32
//! header_len  u32
//! header      JSON text, header_len bytes
//! body        little-endian f64 / u64 arrays
//! checksum    SHA-256 of every preceding byte
//! ```
//!
//! Readers check the magic, then the checksum, then the version.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

const CHECKSUM_LEN: usize = 32;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("invalid header: {0}")]
    Header(String),
}

pub fn encode(magic: &[u8; 8], version: u32, header: &[u8], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + body.len() + CHECKSUM_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Splits a container into (header, body) after validating it.
pub fn decode<'a>(bytes: &'a [u8], magic: &[u8; 8], version: u32) -> Result<(&'a [u8], &'a [u8]), FormatError> {
    if bytes.len() < PREAMBLE_LEN + CHECKSUM_LEN {
        return Err(FormatError::CorruptFile(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(FormatError::CorruptFile("bad magic".into()));
    }
    let (content, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(content).as_slice() != stored {
        return Err(FormatError::CorruptFile("checksum mismatch".into()));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(FormatError::FormatVersionMismatch {
            found,
            expected: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if PREAMBLE_LEN + header_len > content.len() {
        return Err(FormatError::CorruptFile("header length exceeds file".into()));
    }
    Ok((
        &content[PREAMBLE_LEN..PREAMBLE_LEN + header_len],
        &content[PREAMBLE_LEN + header_len..],
    ))
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct BodyWriter {
    pub bytes: Vec<u8>,
}

impl BodyWriter {
    pub fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

pub struct BodyReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take8(&mut self) -> Result<[u8; 8], FormatError> {
        let end = self.pos + 8;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| FormatError::CorruptFile("body ends early".into()))?;
        self.pos = end;
        Ok(s.try_into().expect("8 bytes"))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take8()?))
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::CorruptFile("count overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take8()?))
    }

    pub fn f64s(&mut self, out: &mut [f64]) -> Result<(), FormatError> {
        for v in out.iter_mut() {
            *v = self.f64()?;
        }
        Ok(())
    }

    /// Guards allocations driven by counts read from the file.
    pub fn expect_at_least(&self, items: usize, bytes_each: usize) -> Result<(), FormatError> {
        let need = items.saturating_mul(bytes_each);
        if need > self.bytes.len() - self.pos {
            return Err(FormatError::CorruptFile("declared count exceeds body".into()));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::CorruptFile("trailing bytes after body".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFMT\0";

    #[test]
    fn round_trip() {
        let mut w = BodyWriter::default();
        w.u64(7);
        w.f64(-0.0);
        w.f64(f64::MIN_POSITIVE);
        let bytes = encode(MAGIC, 3, b"{\"a\":1}", &w.bytes);
        let (h, b) = decode(&bytes, MAGIC, 3).unwrap();
        assert_eq!(h, b"{\"a\":1}");
        let mut r = BodyReader::new(b);
        assert_eq!(r.u64().unwrap(), 7);
        assert_eq!(r.f64().unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.f64().unwrap(), f64::MIN_POSITIVE);
        r.finish().unwrap();
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(MAGIC, 3, b"{}", &[1, 2, 3, 4, 5, 6, 7, 8]);
        for cut in [0, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], MAGIC, 3), Err(FormatError::CorruptFile(_))));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(decode(&flipped, MAGIC, 3), Err(FormatError::CorruptFile(_))));
        assert!(matches!(
            decode(&bytes, MAGIC, 4),
            Err(FormatError::FormatVersionMismatch { found: 3, expected: 4 })
        ));
        assert!(matches!(decode(&bytes, b"OTHERFM\0", 3), Err(FormatError::CorruptFile(_))));
    }
}
