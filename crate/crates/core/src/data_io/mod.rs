//! On-disk formats and the synthetic data generator.
//!
//! All multi-byte integers and reals are little-endian. Writes go to a
//! temporary file in the target directory that is renamed into place, so a
//! reader never observes a partial file.

mod embeddings;
mod index_file;
mod manifest;
mod synthetic;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use embeddings::{
    read_embeddings, sidecar_path, write_embeddings, MetadataLine, EMBEDDING_MAGIC,
};
pub use index_file::{
    read_any_index, read_index, read_protected_index, write_index, write_protected_index, AnyIndex,
    INDEX_MAGIC,
};
pub use manifest::{sha256_hex, write_bundle, write_with_manifest, Manifest, ManifestEntry};
pub use synthetic::{generate_synthetic, SplitProportions, SyntheticModel};

pub const FORMAT_VERSION: u16 = 1;

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Little-endian byte sink.
#[derive(Default)]
pub(crate) struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, len: usize) -> Result<()> {
        let v = u32::try_from(len).map_err(|_| {
            Error::InvalidParameter(format!("length {len} exceeds the format limit"))
        })?;
        self.u32(v);
        Ok(())
    }
}

/// Little-endian byte source; running past the end is a truncation error.
pub(crate) struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let out = self.data.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.array()?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<()> {
        match self.u16()? {
            FORMAT_VERSION => Ok(()),
            v => Err(Error::VersionMismatch(v)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Reads `dim` f32 values as a validated embedding.
pub(crate) fn read_vector(
    dec: &mut Decoder<'_>,
    dim: usize,
) -> Result<crate::model::EmbeddingVector> {
    let values = (0..dim).map(|_| dec.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    crate::model::EmbeddingVector::new(values).map_err(|e| Error::Corrupt(e.to_string()))
}

pub(crate) fn write_vector(enc: &mut Encoder, v: &crate::model::EmbeddingVector) {
    for &x in v.values() {
        enc.f32(x as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_reports_truncation() {
        let mut d = Decoder::new(&[1, 0, 0]);
        assert_eq!(d.u16().unwrap(), 1);
        assert!(matches!(d.u16(), Err(Error::Truncated)));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
