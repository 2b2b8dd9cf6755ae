//! Run manifests: plan hashing, run directories, and artifact inventories.
//!
//! Every command executes inside its own run directory named by a hash of
//! the fully resolved plan (command plus every effective setting). The
//! manifest written alongside the artifacts records the plan, where each
//! setting came from, and a SHA-256 inventory of every produced file, so
//! two runs can be compared byte-for-byte by comparing manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CommandConfig;
use crate::error::{IoContext, LabError, Result};

/// One produced file, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// The record written as `manifest.json` in every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub plan_hash: String,
    pub config: serde_json::Value,
    /// Dotted key → "flag" | "file" | "env" | "default".
    pub provenance: BTreeMap<String, String>,
    /// Sorted by path; excludes the manifest itself.
    pub artifacts: Vec<ArtifactEntry>,
    /// Wall-clock phase timings; informational only, not covered by any
    /// determinism guarantee.
    pub timings_ms: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    /// True when the command failed after the run directory was created.
    pub incomplete: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of the resolved plan's canonical JSON encoding.
pub fn plan_hash(command: &CommandConfig) -> Result<String> {
    let bytes = serde_json::to_vec(command)
        .map_err(|e| LabError::run(format!("plan not encodable: {e}")))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex(&hasher.finalize())
}

/// Hex SHA-256 of a file, streamed.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).at(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Creates `<root>/runs/<plan prefix>` exclusively. When that directory
/// already exists (a rerun of the same plan), `-2`, `-3`, … suffixes keep
/// earlier runs untouched.
pub fn create_run_dir(output_root: &Path, plan_hash: &str) -> Result<PathBuf> {
    let runs = output_root.join("runs");
    fs::create_dir_all(&runs).at(&runs)?;
    let base = &plan_hash[..16.min(plan_hash.len())];
    for attempt in 1..=9999u32 {
        let name = if attempt == 1 { base.to_string() } else { format!("{base}-{attempt}") };
        let dir = runs.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(LabError::Io { path: dir, source: e }),
        }
    }
    Err(LabError::run(format!("too many runs named {base} under {}", runs.display())))
}

/// Inventories every file under the run directory (except the manifest),
/// sorted by relative path with forward slashes.
pub fn collect_artifacts(run_dir: &Path) -> Result<Vec<ArtifactEntry>> {
    let mut entries = Vec::new();
    walk(run_dir, run_dir, &mut entries)?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<ArtifactEntry>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        let path = entry.path();
        let kind = entry.file_type().at(&path)?;
        if kind.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| LabError::run(format!("artifact escaped run dir: {}", path.display())))?
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = entry.metadata().at(&path)?.len();
            out.push(ArtifactEntry { path: rel, sha256: sha256_file(&path)?, bytes });
        }
    }
    Ok(())
}

pub fn write_manifest(run_dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = run_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| LabError::run(format!("manifest not encodable: {e}")))?;
    text.push('\n');
    fs::write(&path, text).at(&path)
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| LabError::format(&path, format!("bad manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ReportConfig;

    fn plan(tables: &str) -> CommandConfig {
        CommandConfig::Report(ReportConfig { tables: PathBuf::from(tables) })
    }

    #[test]
    fn plan_hash_is_stable_and_sensitive_to_settings() {
        let a = plan_hash(&plan("t")).unwrap();
        let b = plan_hash(&plan("t")).unwrap();
        let c = plan_hash(&plan("other")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn rerunning_a_plan_gets_a_suffixed_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let hash = plan_hash(&plan("t")).unwrap();
        let first = create_run_dir(tmp.path(), &hash).unwrap();
        let second = create_run_dir(tmp.path(), &hash).unwrap();
        assert_ne!(first, second);
        assert!(first.ends_with(format!("runs/{}", &hash[..16])));
        assert!(second.to_string_lossy().ends_with("-2"));
    }

    #[test]
    fn artifact_inventory_is_sorted_and_skips_the_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("sub")).unwrap();
        fs::write(tmp.path().join("sub/z.bin"), b"zzz").unwrap();
        fs::write(tmp.path().join("a.csv"), b"aaa").unwrap();
        fs::write(tmp.path().join(MANIFEST_FILE), b"{}").unwrap();

        let arts = collect_artifacts(tmp.path()).unwrap();
        let paths: Vec<_> = arts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["a.csv", "sub/z.bin"]);
        assert_eq!(arts[0].sha256, sha256_hex(b"aaa"));
        assert_eq!(arts[0].bytes, 3);
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let tmp = tempfile::tempdir().unwrap();
        let m = Manifest {
            command: "report".into(),
            plan_hash: "abc".into(),
            config: serde_json::json!({"tables": "t"}),
            provenance: BTreeMap::from([("report.tables".to_string(), "flag".to_string())]),
            artifacts: vec![],
            timings_ms: BTreeMap::new(),
            warnings: vec!["w".into()],
            incomplete: false,
        };
        write_manifest(tmp.path(), &m).unwrap();
        let back = read_manifest(tmp.path()).unwrap();
        assert_eq!(back.plan_hash, "abc");
        assert_eq!(back.warnings, vec!["w".to_string()]);
    }
}
