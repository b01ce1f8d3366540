//! Dataset files and run manifests.
//!
//! Dataset layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `CFLW` |
//! | 4     | u32 version (1) |
//! | 8     | u64 row count |
//! | 8     | u64 column count |
//! | rows·cols·8 | f64 payload, row-major |
//!
//! Every artifact `name.ext` has a sidecar manifest `name.manifest.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symspace::SpaceDescriptor;

pub const DATASET_MAGIC: &[u8; 4] = b"CFLW";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A row-major table of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "dataset payload length");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Splits off rows `[at, rows)` into a second dataset.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.rows);
        let (a, b) = self.data.split_at(at * self.cols);
        (
            Dataset::new(at, self.cols, a.to_vec()),
            Dataset::new(self.rows - at, self.cols, b.to_vec()),
        )
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), IoError> {
    let err = io_err(path);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(ds.rows as u64).to_le_bytes())?;
        w.write_all(&(ds.cols as u64).to_le_bytes())?;
        for v in &ds.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(err)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let format = |reason: String| IoError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < HEADER_LEN {
        return Err(format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(format("bad magic, not a dataset file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(format(format!("unsupported dataset version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| format("row/column counts overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Dataset { rows, cols, data })
}

/// `dir/name.ext` ↦ `dir/name.manifest.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

/// One pipeline stage as recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Subcommand name, e.g. `gen-data`.
    pub stage: String,
    /// Fully resolved configuration, sufficient to re-run the stage.
    pub config: serde_json::Value,
    /// Stage-specific results (acceptance rates, drop counts, losses, ...).
    #[serde(default)]
    pub summary: serde_json::Value,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    /// Seconds since the Unix epoch when the stage finished.
    pub finished_unix: u64,
}

/// Append-only record of how an artifact was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub space: Option<SpaceDescriptor>,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            space: None,
            stages: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, IoError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(IoError::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported manifest schema {}", m.schema_version),
            });
        }
        Ok(m)
    }

    /// Reads the sidecar of `artifact`, or starts an empty manifest if it has none.
    pub fn for_artifact(artifact: &Path) -> Result<Self, IoError> {
        let side = sidecar_path(artifact);
        if side.exists() {
            Self::read(&side)
        } else {
            Ok(Self::default())
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_vec_pretty(self).map_err(|source| IoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn push(&mut self, record: StageRecord) {
        self.stages.push(record);
    }

    pub fn last_stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.stage == name)
    }
}
