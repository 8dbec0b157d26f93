//! Encoded descriptor files (`VPRD`), also used for saved indexes.
//!
//! Framed like the other binary formats: magic, u16 version, body, CRC32 of
//! the body. Body: `dim u32 | count u32 | count × (role u8 | id len u16 |
//! id bytes | dim × f32)`.

use std::path::Path;

use super::{frame, read_file, unframe, write_file, ByteReader, ByteWriter};
use crate::error::{Error, FormatErrorKind, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"VPRD";
pub const DESCRIPTOR_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Database,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorRecord {
    pub id: String,
    pub role: Role,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorFile {
    pub dim: usize,
    pub records: Vec<DescriptorRecord>,
}

impl DescriptorFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.u32(self.dim as u32);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            if r.values.len() != self.dim {
                return Err(Error::invalid(format!("descriptor {} has wrong length", r.id)));
            }
            w.u8(match r.role {
                Role::Database => 0,
                Role::Query => 1,
            });
            w.str16(&r.id)?;
            w.f32s(&r.values);
        }
        Ok(frame(DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, &w.buf))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let body = unframe(bytes, DESCRIPTOR_MAGIC, DESCRIPTOR_VERSION, path)?;
        let mut r = ByteReader::new(body, path);
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let role = match r.u8()? {
                0 => Role::Database,
                1 => Role::Query,
                t => return Err(r.malformed(&format!("unknown role {t}"))),
            };
            let id = r.str16()?;
            let values = r.f32s(dim)?;
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(
                    path,
                    FormatErrorKind::NonFinite,
                    format!("descriptor {id}"),
                ));
            }
            records.push(DescriptorRecord { id, role, values });
        }
        r.expect_end()?;
        Ok(Self { dim, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &DescriptorRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_body_fails_crc() {
        let f = DescriptorFile {
            dim: 2,
            records: vec![DescriptorRecord {
                id: "a".into(),
                role: Role::Query,
                values: vec![0.6, 0.8],
            }],
        };
        let mut b = f.encode().unwrap();
        assert_eq!(DescriptorFile::decode(&b, Path::new("x")).unwrap(), f);
        b[12] ^= 1;
        assert!(matches!(
            DescriptorFile::decode(&b, Path::new("x")),
            Err(Error::Format {
                kind: FormatErrorKind::CrcMismatch,
                ..
            })
        ));
    }
}
