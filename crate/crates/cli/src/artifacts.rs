//! Versioned JSON artifacts and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use saap_core::hash::sha256_hex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ARTIFACT_VERSION: u32 = 1;

pub const BASE_CKPT: &str = "base.ckpt";
pub const TRAIN_REPORT: &str = "train.json";
pub const GROUPS: &str = "groups.json";
pub const CALIBRATION: &str = "calibration.json";
pub const SCORES_JSON: &str = "scores.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const STABILITY: &str = "stability.json";
pub const PLAN: &str = "plan.json";
pub const PRUNED_CKPT: &str = "pruned.ckpt";
pub const PRUNE_REPORT: &str = "prune.json";
pub const RECOVERED_CKPT: &str = "recovered.ckpt";
pub const RECOVERY_REPORT: &str = "recovery.json";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const BENCH: &str = "bench.json";
pub const TIMINGS: &str = "timings.json";
pub const MANIFEST: &str = "manifest.json";

/// Artifacts whose content depends on wall-clock measurements.
pub const VOLATILE: [&str; 2] = [BENCH, TIMINGS];

pub fn eval_report_name(stage: saap_core::eval::Stage) -> String {
    format!("eval_{stage}.json")
}

/// Common wrapper of every JSON artifact: what produced it, under which
/// config and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub data: T,
}

#[derive(Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Reads an enveloped artifact, checking its schema name and version.
pub fn read_envelope<T: DeserializeOwned>(path: &Path, schema: &str, producer: &str) -> CliResult<Envelope<T>> {
    if !path.is_file() {
        return Err(CliError::MissingInput {
            what: format!("{schema} artifact"),
            path: path.to_path_buf(),
            hint: format!("run `saap {producer}` first"),
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |message: String| CliError::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let header: Header = serde_json::from_str(&text).map_err(|e| bad(format!("not an artifact: {e}")))?;
    if header.schema != schema {
        return Err(bad(format!("holds `{}`, expected `{schema}`", header.schema)));
    }
    if header.version != ARTIFACT_VERSION {
        return Err(bad(format!(
            "schema version {} is not supported (expected {ARTIFACT_VERSION})",
            header.version
        )));
    }
    serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
    pub volatile: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input text, by role.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactEntry>,
    /// Hash over the names and hashes of all non-volatile artifacts.
    pub digest: String,
}

impl Manifest {
    /// Hashes every file directly inside `dir` except the manifest itself.
    pub fn scan(
        dir: &Path,
        config_hash: String,
        seeds: BTreeMap<String, u64>,
        inputs: BTreeMap<String, String>,
    ) -> CliResult<Manifest> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST))
            .collect();
        files.sort();
        let mut artifacts = Vec::with_capacity(files.len());
        let mut stable = String::new();
        for path in files {
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let file = path.file_name().expect("file").to_string_lossy().into_owned();
            let sha256 = sha256_hex(&bytes);
            let volatile = VOLATILE.contains(&file.as_str());
            if !volatile {
                stable.push_str(&format!("{file}:{sha256}\n"));
            }
            artifacts.push(ArtifactEntry {
                file,
                sha256,
                bytes: bytes.len() as u64,
                volatile,
            });
        }
        Ok(Manifest {
            version: ARTIFACT_VERSION,
            config_hash,
            seeds,
            inputs,
            artifacts,
            digest: sha256_hex(stable.as_bytes()),
        })
    }
}
