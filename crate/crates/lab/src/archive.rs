//! The container format every binary artifact is stored in.
//!
//! An archive is a JSON header plus named `f64` blobs:
//!
//! ```text
//! "FSARCH1\n"              8-byte magic
//! header_len: u64 LE
//! header JSON              { kind, meta, blobs: [{name, len}, ...] }
//! blob data                f64 little-endian, concatenated in header order
//! ```
//!
//! The header is self-describing (`kind` names the artifact type, `meta`
//! carries its structured metadata), so a reader can reject a mismatched
//! file before touching the numeric payload. Writing is deterministic:
//! identical content produces identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, LabError, Result};

const MAGIC: &[u8; 8] = b"FSARCH1\n";

/// Caps the declared header length so a corrupt file cannot ask us to
/// allocate gigabytes before the JSON parser ever sees a byte.
const MAX_HEADER_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct BlobSpec {
    name: String,
    /// Element count, not byte count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobSpec>,
}

/// An archive loaded into memory or staged for writing.
#[derive(Debug)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    blobs: Vec<(String, Vec<f64>)>,
}

impl Archive {
    pub fn new(kind: &str, meta: &impl Serialize) -> Result<Self> {
        let meta = serde_json::to_value(meta)
            .map_err(|e| LabError::run(format!("archive metadata does not serialize: {e}")))?;
        Ok(Archive {
            kind: kind.to_string(),
            meta,
            blobs: Vec::new(),
        })
    }

    /// Stages a named blob. Names must be unique within the archive.
    pub fn add_blob(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        if self.blobs.iter().any(|(n, _)| n == name) {
            return Err(LabError::run(format!("archive already has a blob `{name}`")));
        }
        self.blobs.push((name.to_string(), data));
        Ok(())
    }

    pub fn blob(&self, name: &str) -> Result<&[f64]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| LabError::run(format!("archive has no blob `{name}`")))
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|(n, _)| n.as_str())
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| LabError::run(format!("archive metadata does not fit: {e}")))
    }

    /// Errors unless the archive is of the expected kind; `path` only feeds
    /// the error message.
    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(LabError::format(
                path,
                format!("expected a `{kind}` archive, found `{}`", self.kind),
            ));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blobs: self
                .blobs
                .iter()
                .map(|(name, data)| BlobSpec {
                    name: name.clone(),
                    len: data.len(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| LabError::format(path, format!("header serialization failed: {e}")))?;
        let file = File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC).at(path)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).at(path)?;
        w.write_all(&header_bytes).at(path)?;
        for (_, data) in &self.blobs {
            for v in data {
                w.write_all(&v.to_le_bytes()).at(path)?;
            }
        }
        w.flush().at(path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Archive> {
        let file = File::open(path).at(path)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| LabError::format(path, "file too short for an archive magic"))?;
        if &magic != MAGIC {
            return Err(LabError::format(path, "not an archive (bad magic)"));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)
            .map_err(|_| LabError::format(path, "truncated before the header length"))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_BYTES {
            return Err(LabError::format(
                path,
                format!("header claims {header_len} bytes, refusing"),
            ));
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        r.read_exact(&mut header_bytes)
            .map_err(|_| LabError::format(path, "truncated inside the header"))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| LabError::format(path, format!("malformed header: {e}")))?;
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for spec in &header.blobs {
            let mut bytes = vec![0u8; spec.len * 8];
            r.read_exact(&mut bytes).map_err(|_| {
                LabError::format(path, format!("truncated inside blob `{}`", spec.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push((spec.name.clone(), data));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).at(path)? != 0 {
            return Err(LabError::format(path, "trailing bytes after the last blob"));
        }
        Ok(Archive {
            kind: header.kind,
            meta: header.meta,
            blobs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrips_meta_and_blobs_bit_for_bit() {
        let dir = tmp();
        let path = dir.path().join("a.fsa");
        let mut ar = Archive::new("test-kind", &serde_json::json!({"n": 3, "tag": "x"})).unwrap();
        let weird = vec![0.0, -0.0, 1e-300, -1e300, 1.0 + f64::EPSILON, 12.0 / 255.0];
        ar.add_blob("weird", weird.clone()).unwrap();
        ar.add_blob("empty", vec![]).unwrap();
        ar.write(&path).unwrap();

        let back = Archive::read(&path).unwrap();
        assert_eq!(back.kind, "test-kind");
        assert_eq!(back.meta["n"], 3);
        assert_eq!(back.blob("empty").unwrap(), &[] as &[f64]);
        let got = back.blob("weird").unwrap();
        assert_eq!(got.len(), weird.len());
        for (a, b) in got.iter().zip(&weird) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn identical_content_writes_identical_bytes() {
        let dir = tmp();
        let make = |p: &Path| {
            let mut ar = Archive::new("k", &serde_json::json!({"a": 1})).unwrap();
            ar.add_blob("b", vec![1.5, 2.5]).unwrap();
            ar.write(p).unwrap();
        };
        let p1 = dir.path().join("one.fsa");
        let p2 = dir.path().join("two.fsa");
        make(&p1);
        make(&p2);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing_garbage() {
        let dir = tmp();
        let path = dir.path().join("a.fsa");
        let mut ar = Archive::new("k", &serde_json::json!({})).unwrap();
        ar.add_blob("b", vec![1.0, 2.0, 3.0]).unwrap();
        ar.write(&path).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.fsa");
        let mut bytes = good.clone();
        bytes[0] = b'X';
        fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(Archive::read(&bad_magic), Err(LabError::Format { .. })));

        let truncated = dir.path().join("trunc.fsa");
        fs::write(&truncated, &good[..good.len() - 5]).unwrap();
        let err = Archive::read(&truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let trailing = dir.path().join("trail.fsa");
        let mut bytes = good;
        bytes.push(0);
        fs::write(&trailing, &bytes).unwrap();
        let err = Archive::read(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn duplicate_blob_names_are_rejected() {
        let mut ar = Archive::new("k", &serde_json::json!({})).unwrap();
        ar.add_blob("b", vec![]).unwrap();
        assert!(ar.add_blob("b", vec![]).is_err());
    }

    #[test]
    fn kind_check_names_the_mismatch() {
        let dir = tmp();
        let path = dir.path().join("a.fsa");
        let ar = Archive::new("dataset", &serde_json::json!({})).unwrap();
        ar.write(&path).unwrap();
        let back = Archive::read(&path).unwrap();
        let err = back.expect_kind("few-shot-model", &path).unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }
}
