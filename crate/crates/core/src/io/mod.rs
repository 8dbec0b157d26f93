//! File formats, dataset manifests, synthetic data and batch sampling.

pub mod batch;
pub mod checkpoint;
pub mod descriptors;
pub mod manifest;
pub mod synth;
pub mod tokens;

use std::path::{Path, PathBuf};

use crate::error::{Error, FormatErrorKind, Result};

pub use batch::{sample_place_balanced_batches, PlaceBalancedSampler};
pub use checkpoint::Checkpoint;
pub use descriptors::{DescriptorFile, DescriptorRecord, Role};
pub use manifest::{DatabaseEntry, DatasetManifest, QueryEntry};
pub use synth::{generate_synthetic, SynthSpec, SyntheticDataset};
pub use tokens::{read_tokens, write_tokens};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian writer.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    /// Length-prefixed (u16) UTF-8 string.
    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::invalid(format!("string too long: {s}")))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }
}

/// Little-endian reader that reports truncation against `path`.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], path: &Path) -> Self {
        Self {
            data,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                &self.path,
                FormatErrorKind::Truncated,
                format!("needed {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    pub fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("invalid UTF-8 string"))
    }

    pub fn malformed(&self, detail: &str) -> Error {
        Error::format(&self.path, FormatErrorKind::Malformed, detail)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(&format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// `magic | version u16 | body | crc32(body)`.
pub(crate) fn frame(magic: &[u8; 4], version: u16, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out
}

/// Checks magic, version and CRC of a [`frame`]d file and returns the body.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u16, path: &Path) -> Result<&'a [u8]> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != magic {
        return Err(Error::format(path, FormatErrorKind::BadMagic, "unexpected magic bytes"));
    }
    let v = r.u16()?;
    if v != version {
        return Err(Error::format(
            path,
            FormatErrorKind::UnsupportedVersion,
            format!("version {v}, expected {version}"),
        ));
    }
    if r.remaining() < 4 {
        return Err(Error::format(path, FormatErrorKind::Truncated, "missing checksum"));
    }
    let body = r.take(r.remaining() - 4)?;
    let crc = r.u32()?;
    if crc32fast::hash(body) != crc {
        return Err(Error::format(
            path,
            FormatErrorKind::CrcMismatch,
            "body checksum mismatch",
        ));
    }
    Ok(body)
}
