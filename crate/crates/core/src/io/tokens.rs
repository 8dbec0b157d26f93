//! Binary token files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VPRT"
//! 4       2     version (u16, currently 1)
//! 6       1     source tag (0 = DINO, 1 = CLIP, 2 = FUSED)
//! 7       2     h_tokens (u16)
//! 9       2     w_tokens (u16)
//! 11      2     dim (u16)
//! 13      4·n   payload, n = h·w·dim f32, row-major
//! 13+4n   4     CRC32 (IEEE) of the payload bytes
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, FormatErrorKind, Result};
use crate::fusion::{Source, TokenSet};
use crate::tensor::Matrix;

pub const TOKEN_MAGIC: &[u8; 4] = b"VPRT";
pub const TOKEN_VERSION: u16 = 1;
pub const TOKEN_HEADER_LEN: usize = 13;

fn dim16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit the token header")))
}

pub fn encode_tokens(tokens: &Matrix, source: Source, grid: (usize, usize)) -> Result<Vec<u8>> {
    if grid.0 * grid.1 != tokens.rows() {
        return Err(Error::invalid(format!(
            "grid {grid:?} does not match {} tokens",
            tokens.rows()
        )));
    }
    tokens.check_finite("token payload")?;
    let mut w = ByteWriter::default();
    w.bytes(TOKEN_MAGIC);
    w.u16(TOKEN_VERSION);
    w.u8(source.tag());
    w.u16(dim16(grid.0, "h_tokens")?);
    w.u16(dim16(grid.1, "w_tokens")?);
    w.u16(dim16(tokens.cols(), "dim")?);
    w.f32s(tokens.data());
    let crc = crc32fast::hash(&w.buf[TOKEN_HEADER_LEN..]);
    w.u32(crc);
    Ok(w.buf)
}

/// Parses a token file image; `path` is only used in diagnostics.
pub fn decode_tokens(bytes: &[u8], path: &Path) -> Result<(Matrix, Source, (usize, usize))> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != TOKEN_MAGIC {
        return Err(Error::format(path, FormatErrorKind::BadMagic, "not a token file"));
    }
    let version = r.u16()?;
    if version != TOKEN_VERSION {
        return Err(Error::format(
            path,
            FormatErrorKind::UnsupportedVersion,
            format!("version {version}, expected {TOKEN_VERSION}"),
        ));
    }
    let tag = r.u8()?;
    let source = Source::from_tag(tag)
        .ok_or_else(|| Error::format(path, FormatErrorKind::BadSourceTag, format!("source tag {tag}")))?;
    let h = r.u16()? as usize;
    let w = r.u16()? as usize;
    let dim = r.u16()? as usize;
    let n = h * w * dim;
    let payload_start = TOKEN_HEADER_LEN;
    let payload = r.f32s(n)?;
    let crc = r.u32()?;
    r.expect_end()?;
    if crc32fast::hash(&bytes[payload_start..payload_start + 4 * n]) != crc {
        return Err(Error::format(
            path,
            FormatErrorKind::CrcMismatch,
            "payload checksum mismatch",
        ));
    }
    if let Some(i) = payload.iter().position(|x| !x.is_finite()) {
        return Err(Error::format(
            path,
            FormatErrorKind::NonFinite,
            format!("non-finite value at payload index {i}"),
        ));
    }
    Ok((Matrix::from_vec(h * w, dim, payload)?, source, (h, w)))
}

pub fn write_tokens(path: &Path, set: &TokenSet) -> Result<()> {
    write_file(path, &encode_tokens(&set.tokens, set.source, set.grid)?)
}

/// Reads a token file as the token set of `image_id`.
pub fn read_tokens(path: &Path, image_id: &str) -> Result<TokenSet> {
    let bytes = read_file(path)?;
    let (tokens, source, grid) = decode_tokens(&bytes, path)?;
    TokenSet::new(tokens, source, image_id, grid)
}
