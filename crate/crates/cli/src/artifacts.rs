//! On-disk stage artifacts: atomic writes, hashes and stage manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Bumped whenever an artifact format changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.json";

/// Writes `bytes` to a temp file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact serializes");
    out.push(b'\n');
    out
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("artifact serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let raw = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&raw).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(rows)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Provenance record written last by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema_version: u32,
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Seed actually used, for stages that draw random numbers.
    pub seed: Option<u64>,
    /// Work-dir-relative path (or absolute external path) -> sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects a stage's outputs and writes them atomically, then the manifest.
pub struct StageWriter {
    work_dir: PathBuf,
    dir: PathBuf,
    stage: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn rel(work_dir: &Path, path: &Path) -> String {
    path.strip_prefix(work_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

impl StageWriter {
    /// Outputs of `stage` live in `work_dir/subdir`.
    pub fn new(work_dir: &Path, subdir: &str, stage: &'static str) -> Result<Self, CliError> {
        let dir = work_dir.join(subdir);
        fs::create_dir_all(&dir)?;
        Ok(Self {
            work_dir: work_dir.to_path_buf(),
            dir,
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(rel(&self.work_dir, path), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.outputs
            .insert(rel(&self.work_dir, &path), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn finish(self, config_hash: &str, seed: Option<u64>) -> Result<StageManifest, CliError> {
        let manifest = StageManifest {
            schema_version: SCHEMA_VERSION,
            stage: self.stage.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        write_atomic(&self.dir.join(MANIFEST), &to_json(&manifest))?;
        Ok(manifest)
    }
}

/// Loads the manifest of a prerequisite stage, failing with the stage to run
/// when it is missing or was written by an incompatible version.
pub fn require(work_dir: &Path, subdir: &str, stage: &'static str) -> Result<StageManifest, CliError> {
    let path = work_dir.join(subdir).join(MANIFEST);
    if !path.exists() {
        return Err(CliError::Prerequisite {
            stage,
            detail: format!("no {stage} outputs in {}", work_dir.join(subdir).display()),
        });
    }
    let m: StageManifest = read_json(&path)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(CliError::Prerequisite {
            stage,
            detail: format!(
                "{} has schema version {} but {} is required",
                path.display(),
                m.schema_version,
                SCHEMA_VERSION
            ),
        });
    }
    Ok(m)
}
