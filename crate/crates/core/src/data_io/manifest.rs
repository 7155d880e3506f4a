//! Output bundles with a `manifest.json` of SHA-256 hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    /// Entries sorted by path.
    pub fn from_files<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> Self {
        let mut files: Vec<ManifestEntry> = files
            .into_iter()
            .map(|(path, data)| ManifestEntry {
                path: path.to_owned(),
                bytes: data.len() as u64,
                sha256: sha256_hex(data),
            })
            .collect();
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Self { files }
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s.into_bytes()
    }

    /// Re-hashes every listed file under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for entry in &self.files {
            let data = std::fs::read(dir.join(&entry.path))?;
            if sha256_hex(&data) != entry.sha256 {
                return Err(Error::Corrupt(format!(
                    "{} does not match its manifest hash",
                    entry.path
                )));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Writes every file into `dir` (created if missing) plus `manifest.json`.
pub fn write_bundle(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    for (name, data) in files {
        if name.contains(['/', '\\']) || name == "manifest.json" {
            return Err(Error::InvalidParameter(format!("bad bundle file name {name:?}")));
        }
        write_atomic(&dir.join(name), data)?;
    }
    let manifest = Manifest::from_files(files.iter().map(|(n, d)| (n.as_str(), d.as_slice())));
    write_atomic(&dir.join("manifest.json"), &manifest.to_json())?;
    Ok(manifest)
}

/// Writes a manifest for files already written next to `primary`, as
/// `<primary>.manifest.json`. Paths are file names relative to that
/// directory.
pub fn write_with_manifest(primary: &Path, written: &[&Path]) -> Result<Manifest> {
    let mut contents = Vec::with_capacity(written.len());
    for p in written {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidParameter(format!("bad output path {}", p.display())))?;
        contents.push((name.to_owned(), std::fs::read(p)?));
    }
    let manifest = Manifest::from_files(contents.iter().map(|(n, d)| (n.as_str(), d.as_slice())));
    let mut target = primary.as_os_str().to_owned();
    target.push(".manifest.json");
    write_atomic(Path::new(&target), &manifest.to_json())?;
    Ok(manifest)
}
