//! Embedding files (`BEMB`) and their line-delimited JSON metadata sidecar.
//!
//! Header: magic, u16 version, u16 reserved (0), u32 record count, u32 dim.
//! Each record: u64 subject id, u64 sample id, `dim` f32 values.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_vector, write_atomic, write_vector, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{Race, SampleId, Sex, SoftBiometrics, Split, SubjectId, SubjectRecord};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"BEMB";

/// One sidecar line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataLine {
    pub subject_id: SubjectId,
    pub sample_id: SampleId,
    pub sex: Option<Sex>,
    pub race: Option<Race>,
    pub age: Option<u32>,
    pub split: Split,
}

impl MetadataLine {
    fn from_record(r: &SubjectRecord) -> Self {
        Self {
            subject_id: r.subject_id,
            sample_id: r.sample_id,
            sex: r.soft.map(|s| s.sex),
            race: r.soft.map(|s| s.race),
            age: r.soft.map(|s| s.age),
            split: r.split,
        }
    }

    fn soft(&self) -> Result<Option<SoftBiometrics>> {
        match (self.sex, self.race, self.age) {
            (Some(sex), Some(race), Some(age)) => SoftBiometrics::new(sex, race, age)
                .map(Some)
                .map_err(|e| Error::Metadata(e.to_string())),
            (None, None, None) => Ok(None),
            _ => Err(Error::Metadata(format!(
                "subject {} sample {}: soft biometrics must be all present or all absent",
                self.subject_id, self.sample_id
            ))),
        }
    }
}

/// `<path>.meta`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_embeddings(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let first = records.first().ok_or(Error::Empty("embedding file"))?;
    let dim = first.embedding.dim();
    let mut enc = Encoder::default();
    enc.bytes(&EMBEDDING_MAGIC);
    enc.u16(FORMAT_VERSION);
    enc.u16(0);
    enc.len_u32(records.len())?;
    enc.len_u32(dim)?;
    let mut meta = String::new();
    for r in records {
        if r.embedding.dim() != dim {
            return Err(Error::dims(dim, r.embedding.dim()));
        }
        enc.u64(r.subject_id);
        enc.u64(r.sample_id);
        write_vector(&mut enc, &r.embedding);
        meta.push_str(&serde_json::to_string(&MetadataLine::from_record(r)).expect("serializable"));
        meta.push('\n');
    }
    write_atomic(&sidecar_path(path), meta.as_bytes())?;
    write_atomic(path, &enc.buf)
}

/// Reads records in file order and joins the sidecar metadata.
pub fn read_embeddings(path: &Path) -> Result<Vec<SubjectRecord>> {
    let data = std::fs::read(path)?;
    let mut dec = Decoder::new(&data);
    dec.magic(EMBEDDING_MAGIC)?;
    dec.version()?;
    let _reserved = dec.u16()?;
    let count = dec.u32()? as usize;
    let dim = dec.u32()? as usize;
    if count == 0 {
        return Err(Error::Corrupt("record count is zero".into()));
    }
    if dim == 0 {
        return Err(Error::Corrupt("dimension is zero".into()));
    }
    let record_len = 16 + 4 * dim;
    if (data.len() - 16) < count.saturating_mul(record_len) {
        return Err(Error::Truncated);
    }

    let meta = read_sidecar(&sidecar_path(path))?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let subject_id = dec.u64()?;
        let sample_id = dec.u64()?;
        let embedding = read_vector(&mut dec, dim)?;
        let line = meta
            .get(&(subject_id, sample_id))
            .ok_or(Error::MetadataJoinMiss { subject_id, sample_id })?;
        records.push(SubjectRecord {
            subject_id,
            sample_id,
            embedding,
            soft: line.soft()?,
            split: line.split,
        });
    }
    dec.finish()?;
    Ok(records)
}

fn read_sidecar(path: &Path) -> Result<HashMap<(SubjectId, SampleId), MetadataLine>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: MetadataLine = serde_json::from_str(line)
            .map_err(|e| Error::Metadata(format!("line {}: {e}", n + 1)))?;
        let key = (entry.subject_id, entry.sample_id);
        if out.insert(key, entry).is_some() {
            return Err(Error::Metadata(format!(
                "line {}: duplicate entry for subject {} sample {}",
                n + 1,
                key.0,
                key.1
            )));
        }
    }
    Ok(out)
}
